"""Suite-wide setup.

Float32 reductions depend on the intra-op parallel grain, so pinned
fixtures (loss traces, measured margins) are only stable at a fixed
thread count. Four threads matches the fixture-generation environment.
"""

import torch

torch.set_num_threads(4)
