"""
Configuration settings for the linear-SCM elicitation benchmark
"""
import os

# Base directory - where the app is running
BASE_DIR = os.path.dirname(os.path.abspath(__file__))

# Run artifacts directory - can be overridden by environment variable
OUTPUT_DIR = os.getenv('BENCH_OUTPUT_DIR', os.path.join(BASE_DIR, 'runs'))

# Prompt template ([system] / [user] sections with {placeholders})
PROMPT_TEMPLATE_FILE = os.getenv(
    'BENCH_PROMPT_TEMPLATE',
    os.path.join(BASE_DIR, 'app', 'templates', 'elicitation_prompt.txt')
)

# Experimental protocol defaults
DEFAULT_BUDGET = 5           # feedback-loop calls per node
DEFAULT_REPETITIONS = 25     # runs per (backend, dag, condition) cell
DEFAULT_SEED = 0

# Backend defaults
REQUEST_TIMEOUT = 60         # seconds per HTTP request
MAX_RETRIES = 3
BACKOFF_INITIAL = 1.0        # seconds, doubled per retry
BACKOFF_CAP = 30.0
BACKOFF_JITTER = 0.2         # +/- 20%

# Concurrency
MAX_IN_FLIGHT_REQUESTS = int(os.getenv('BENCH_MAX_IN_FLIGHT', '4'))
MAX_WORKERS = int(os.getenv('BENCH_MAX_WORKERS', '4'))

# Normal quantile for 95% confidence half-widths
CI_Z = 1.96

LOG_LEVEL = os.getenv('BENCH_LOG_LEVEL', 'INFO')
