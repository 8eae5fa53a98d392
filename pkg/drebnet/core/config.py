import os

from dotenv import load_dotenv

load_dotenv()

LOG_LEVEL = (os.getenv('DREB_LOG') or 'info').strip().lower()
LOG_FILE = (os.getenv('DREB_LOG_FILE') or '').strip()
DEBUG_CHECKS = (os.getenv('DREB_DEBUG_CHECKS') or '0').strip().lower() in {'1', 'true', 'yes'}
DEFAULT_DTYPE = (os.getenv('DREB_DEFAULT_DTYPE') or 'f32').strip().lower()

LOG_LEVELS = {'error', 'info', 'debug'}
if LOG_LEVEL not in LOG_LEVELS:
    LOG_LEVEL = 'info'
if DEFAULT_DTYPE not in {'f32', 'f64'}:
    DEFAULT_DTYPE = 'f32'

TENSOR_DUMP_MAGIC = b'DRBT'
TENSOR_DUMP_VERSION = 1
CHECKPOINT_MAGIC = b'DRBC'
CHECKPOINT_VERSION = 1
