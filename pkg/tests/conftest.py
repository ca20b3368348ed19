import sys
from pathlib import Path

# make sibling test modules importable (the acceptance suite reuses the
# metrics oracle defined in test_metrics)
sys.path.insert(0, str(Path(__file__).parent))
