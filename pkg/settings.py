import os

from dotenv import load_dotenv

load_dotenv()

OUT_DIR = os.getenv('DISTNMPC_OUT_DIR', 'output')
LOG_LEVEL = os.getenv('DISTNMPC_LOG_LEVEL', 'INFO').upper()
WORKERS = int(os.getenv('DISTNMPC_WORKERS', '1'))
SCENARIO_DIR = os.getenv('DISTNMPC_SCENARIO_DIR', os.path.join(os.path.dirname(os.path.abspath(__file__)),
                                                                 'data', 'scenarios'))
