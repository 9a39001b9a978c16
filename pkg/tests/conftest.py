import sys
from pathlib import Path

import torch

# oracles.py lives beside the tests
sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(2)
