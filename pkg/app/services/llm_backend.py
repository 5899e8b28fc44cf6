"""
Completion backends for elicitation prompts

Uniform interface over a JSON-over-HTTP chat-completion endpoint and three
deterministic local backends (echo-oracle, scripted-replay, constant), plus
extraction of the JSON payload from raw model text.
"""
import json
import logging
import os
import random
import threading
import time
from collections import defaultdict
from dataclasses import asdict, dataclass

import requests

from config import (
    BACKOFF_CAP,
    BACKOFF_INITIAL,
    BACKOFF_JITTER,
    MAX_IN_FLIGHT_REQUESTS,
    MAX_RETRIES,
    REQUEST_TIMEOUT,
)
from app.services.equation import format_equation

logger = logging.getLogger(__name__)

BACKEND_KINDS = ('http', 'echo-oracle', 'scripted-replay', 'constant')

EQUATION_FIELD = 'proposed_lin_str_eq'

# Global cap on concurrent requests to remote endpoints
_in_flight = threading.BoundedSemaphore(MAX_IN_FLIGHT_REQUESTS)

_jitter = random.Random()


# ============================================================================
# ERRORS
# ============================================================================

class BackendError(Exception):
    """Hard backend failure: aborts the current node"""

    def __init__(self, message, http_status=None):
        super().__init__(message)
        self.http_status = http_status


class BackendConfigError(BackendError):
    pass


class CredentialMissingError(BackendError):
    pass


class RetriesExhaustedError(BackendError):
    pass


class BackendRequestError(BackendError):
    """Non-retryable HTTP status or unreadable response body"""


class ReplayExhaustedError(BackendError):
    pass


class GroundTruthMissingError(BackendError):
    pass


class PayloadExtractionError(Exception):
    """The response text does not carry a usable JSON payload"""

    code = 'E4'

    @property
    def message(self):
        return str(self)


class NoJsonObjectError(PayloadExtractionError):
    pass


class MissingEquationFieldError(PayloadExtractionError):
    pass


# ============================================================================
# TYPES
# ============================================================================

@dataclass(frozen=True)
class BackendConfig:
    """Backend selection and call parameters"""

    kind: str
    model_id: str = ''
    endpoint_url: str = None
    temperature: float = 0.0
    request_timeout: float = REQUEST_TIMEOUT
    max_retries: int = MAX_RETRIES
    credential_env_var: str = None
    name: str = None
    send_seed: bool = False
    constant_text: str = ''
    replay_path: str = None

    def __post_init__(self):
        if self.kind not in BACKEND_KINDS:
            raise BackendConfigError(f"Unknown backend kind {self.kind!r} (expected one of {BACKEND_KINDS})")
        if self.temperature < 0:
            raise BackendConfigError(f"temperature must be >= 0, got {self.temperature}")
        if self.max_retries < 0:
            raise BackendConfigError(f"max_retries must be >= 0, got {self.max_retries}")
        if self.kind == 'http' and not self.endpoint_url:
            raise BackendConfigError('http backend requires endpoint_url')
        if self.kind == 'scripted-replay' and not self.replay_path:
            raise BackendConfigError('scripted-replay backend requires replay_path')

    @property
    def label(self):
        return self.name or self.model_id or self.kind

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, data, base_dir=None):
        """
        Build from a JSON mapping; a relative replay_path resolves against base_dir
        """
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise BackendConfigError(f"Unknown backend config field(s): {sorted(unknown)}")
        data = dict(data)
        if data.get('replay_path') and base_dir and not os.path.isabs(data['replay_path']):
            data['replay_path'] = os.path.join(base_dir, data['replay_path'])
        return cls(**data)


def load_backend_config(path):
    with open(path, 'r', encoding='utf-8') as f:
        data = json.load(f)
    return BackendConfig.from_dict(data, base_dir=os.path.dirname(os.path.abspath(path)))


@dataclass(frozen=True)
class RawResponse:
    text: str
    latency: float
    attempt_count: int = 1
    http_status: int = None


# ============================================================================
# AUDIT LOG
# ============================================================================

class AuditLog:
    """Append-only JSONL record of every backend call; safe for concurrent appends"""

    def __init__(self, path):
        self.path = path
        self._lock = threading.Lock()
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)

    def append(self, record):
        line = json.dumps(record, ensure_ascii=False)
        with self._lock:
            with open(self.path, 'a', encoding='utf-8') as f:
                f.write(line + '\n')

    def read(self):
        if not os.path.exists(self.path):
            return []
        with open(self.path, 'r', encoding='utf-8') as f:
            return [json.loads(line) for line in f if line.strip()]


# ============================================================================
# BACKENDS
# ============================================================================

class Backend:
    """Base class: times the call and writes the audit record"""

    def __init__(self, config, dag=None, audit_log=None, run_id=None):
        self.config = config
        self.dag = dag
        self.audit_log = audit_log
        self.run_id = run_id

    def complete(self, prompt, run_seed=0):
        """
        Request one completion for a prompt

        Args:
            prompt: PromptBundle
            run_seed: Seed of the current run (sent only when send_seed is set)

        Returns:
            RawResponse

        Raises:
            BackendError: hard failure
        """
        started = time.monotonic()
        try:
            text, attempt_count, http_status = self._complete(prompt, run_seed)
        except BackendError as e:
            self._audit(prompt, None, time.monotonic() - started, e.http_status, error=str(e))
            raise
        raw = RawResponse(
            text=text,
            latency=time.monotonic() - started,
            attempt_count=attempt_count,
            http_status=http_status,
        )
        self._audit(prompt, raw.text, raw.latency, http_status)
        return raw

    def _complete(self, prompt, run_seed):
        raise NotImplementedError

    def _audit(self, prompt, text, latency, http_status, error=None):
        if self.audit_log is None:
            return
        record = {
            'run_id': self.run_id,
            'target': prompt.target,
            'attempt': prompt.attempt_index,
            'prompt_sha256': prompt.sha256(),
            'response_text': text,
            'latency_ms': round(latency * 1000, 3),
            'http_status': http_status,
        }
        if error:
            record['error'] = error
        self.audit_log.append(record)


def backoff_delay(retry_number, initial=BACKOFF_INITIAL, cap=BACKOFF_CAP, jitter=BACKOFF_JITTER):
    """Delay before retry n (1-based): initial * 2^(n-1), jittered, capped"""
    base = min(cap, initial * (2 ** (retry_number - 1)))
    return min(cap, base * _jitter.uniform(1 - jitter, 1 + jitter))


def _is_retryable(status):
    return status == 429 or status >= 500


class HttpChatBackend(Backend):
    """JSON-over-HTTP chat-completion client (model / messages / temperature)"""

    def _credential(self):
        var = self.config.credential_env_var
        if not var:
            return None
        token = os.environ.get(var)
        if not token:
            raise CredentialMissingError(f"Environment variable {var} is not set")
        return token

    def _payload(self, prompt, run_seed):
        payload = {
            'model': self.config.model_id,
            'messages': [
                {'role': 'system', 'content': prompt.system_text},
                {'role': 'user', 'content': prompt.user_text},
            ],
            'temperature': self.config.temperature,
        }
        if self.config.send_seed:
            payload['seed'] = run_seed
        return payload

    def _complete(self, prompt, run_seed):
        headers = {'Content-Type': 'application/json', 'Accept': 'application/json'}
        token = self._credential()
        if token:
            headers['Authorization'] = f"Bearer {token}"
        payload = self._payload(prompt, run_seed)

        max_retries = self.config.max_retries
        last_error, status = None, None
        for attempt in range(1, max_retries + 2):
            try:
                with _in_flight:
                    response = requests.post(
                        self.config.endpoint_url,
                        json=payload,
                        headers=headers,
                        timeout=self.config.request_timeout,
                    )
            except requests.RequestException as e:
                last_error, status = f"network error: {e}", None
            else:
                status = response.status_code
                if status < 400:
                    return self._read_content(response), attempt, status
                if not _is_retryable(status):
                    raise BackendRequestError(f"HTTP {status}: {response.text[:200]}", http_status=status)
                last_error = f"HTTP {status}"

            if attempt <= max_retries:
                delay = backoff_delay(attempt)
                logger.warning(
                    f"⏳ {self.config.label} [{prompt.target}]: {last_error}; "
                    f"retry {attempt}/{max_retries} in {delay:.1f}s"
                )
                time.sleep(delay)

        raise RetriesExhaustedError(
            f"{self.config.label}: giving up after {max_retries + 1} attempt(s): {last_error}",
            http_status=status,
        )

    @staticmethod
    def _read_content(response):
        try:
            return response.json()['choices'][0]['message']['content']
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise BackendRequestError(
                f"Unexpected chat-completion response body: {response.text[:200]}",
                http_status=response.status_code,
            ) from e


class EchoOracleBackend(Backend):
    """Answers with the ground-truth equation of the prompt's target"""

    def _complete(self, prompt, run_seed):
        if self.dag is None or self.dag.ground_truth is None:
            name = self.dag.name if self.dag is not None else '<none>'
            raise GroundTruthMissingError(f"echo-oracle needs a DAG with ground truth (DAG: {name})")
        equation = self.dag.ground_truth[prompt.target]
        text = json.dumps({
            'thoughts': 'Echoing the ground-truth equation.',
            EQUATION_FIELD: format_equation(equation),
        })
        return text, 1, None


class ScriptedReplayBackend(Backend):
    """
    Replays recorded responses keyed by (target, attempt)

    Several records for the same key are served in file order. A record may
    carry a "dag" field restricting it to one DAG name.
    """

    def __init__(self, config, dag=None, audit_log=None, run_id=None):
        super().__init__(config, dag=dag, audit_log=audit_log, run_id=run_id)
        self._records = defaultdict(list)
        self._cursor = defaultdict(int)
        self._lock = threading.Lock()
        self._load(config.replay_path)

    def _load(self, path):
        if not os.path.exists(path):
            raise BackendConfigError(f"Replay file not found: {path}")
        dag_name = self.dag.name if self.dag is not None else None
        with open(path, 'r', encoding='utf-8') as f:
            for line_no, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                    key = (record['target'], int(record['attempt']))
                    text = record['text']
                except (ValueError, KeyError, TypeError) as e:
                    raise BackendConfigError(f"{path}:{line_no}: invalid replay record ({e})") from e
                if record.get('dag') not in (None, dag_name):
                    continue
                self._records[key].append(text)

    def _complete(self, prompt, run_seed):
        key = (prompt.target, prompt.attempt_index)
        with self._lock:
            index = self._cursor[key]
            recorded = self._records.get(key, [])
            if index >= len(recorded):
                raise ReplayExhaustedError(
                    f"Replay exhausted for target {key[0]!r}, attempt {key[1]} "
                    f"({len(recorded)} recorded)"
                )
            self._cursor[key] = index + 1
        return recorded[index], 1, None


class ConstantBackend(Backend):
    """Always returns the configured text"""

    def _complete(self, prompt, run_seed):
        return self.config.constant_text, 1, None


_BACKENDS = {
    'http': HttpChatBackend,
    'echo-oracle': EchoOracleBackend,
    'scripted-replay': ScriptedReplayBackend,
    'constant': ConstantBackend,
}


def create_backend(config, dag=None, audit_log=None, run_id=None):
    """
    Instantiate the backend for a config

    Backends hold per-run state (replay cursors), so every run gets its own.
    """
    return _BACKENDS[config.kind](config, dag=dag, audit_log=audit_log, run_id=run_id)


# ============================================================================
# PAYLOAD EXTRACTION
# ============================================================================

def extract_json_payload(text):
    """
    Decode the first JSON object embedded in model output

    Tolerates code fences and prose around the object.

    Args:
        text: Raw completion text

    Returns:
        Decoded mapping containing proposed_lin_str_eq

    Raises:
        NoJsonObjectError: no decodable object in the text
        MissingEquationFieldError: the object lacks proposed_lin_str_eq
    """
    if not isinstance(text, str):
        raise NoJsonObjectError('Response is not text')

    decoder = json.JSONDecoder()
    index = text.find('{')
    while index != -1:
        try:
            obj, _ = decoder.raw_decode(text, index)
        except json.JSONDecodeError:
            index = text.find('{', index + 1)
            continue
        except RecursionError:
            raise NoJsonObjectError('JSON in response is nested too deeply to decode')
        if isinstance(obj, dict):
            if EQUATION_FIELD not in obj:
                raise MissingEquationFieldError(
                    f"JSON object has no {EQUATION_FIELD!r} field (keys: {sorted(obj)})"
                )
            return obj
        index = text.find('{', index + 1)

    preview = text[:80].replace('\n', ' ')
    raise NoJsonObjectError(f"No JSON object found in response: {preview!r}")
