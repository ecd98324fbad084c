import sys
from pathlib import Path

# Make the shared corpus helpers importable as `synthcorpus`.
sys.path.insert(0, str(Path(__file__).parent))
