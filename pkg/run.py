import sys
from pathlib import Path

# Add the project root directory to Python path
project_root = Path(__file__).resolve().parent
sys.path.append(str(project_root))

from reefdeploy.app import cli

if __name__ == "__main__":
    cli(prog_name="reefdeploy")
