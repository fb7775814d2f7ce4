import sys
from pathlib import Path

# Make sibling helper modules (fixtures, oracles) importable from any cwd.
sys.path.insert(0, str(Path(__file__).resolve().parent))
