import os
from dataclasses import dataclass, field, fields, replace
from typing import Dict, List, Optional

from dotenv import load_dotenv

# Load environment variables from a .env file
load_dotenv()


class ConfigError(ValueError):
    """Raised for unknown keys or unparsable values."""


class Config:
    """Base configuration of a replica process (read by the control app)."""
    SECRET_KEY = os.environ.get('SECRET_KEY') or os.urandom(24)
    REPLICA_ID = int(os.environ.get('REPLICA_ID', '0'))
    CONTROL_PORT = int(os.environ.get('CONTROL_PORT', '8000'))
    DATA_DIR = os.environ.get('DATA_DIR', 'data')
    CONFIG_FILE = os.environ.get('CONFIG_FILE')


QUORUM_VARIANTS = ('classic', 'fast-uniform', 'fast-large')
TRANSPORTS = ('sim', 'udp')


def _to_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ('1', 'true', 'yes', 'on'):
        return True
    if text in ('0', 'false', 'no', 'off'):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def _to_list(value) -> List[str]:
    if isinstance(value, (list, tuple)):
        return [str(v) for v in value]
    return [part.strip() for part in str(value).split(',') if part.strip()]


@dataclass
class EngineConfig:
    """Every tunable of the engine, the simulator and the UDP backend."""
    quorum_variant: str = 'classic'
    fast_rounds: bool = False
    max_batch_bytes: int = 8 * 1024
    pending_bound: Optional[int] = None
    round_timeout_ms: Optional[float] = None
    election_timeout_ms: Optional[float] = None
    backoff_factor: float = 2.0
    backoff_cap: float = 8.0
    group_commit_ms: float = 1.0
    catchup_chunk: int = 64
    catchup_relay_us: float = 1000.0
    decision_cache_size: int = 4096
    strict: bool = False

    transport: str = 'sim'
    link_latency_us: float = 100.0
    serialization_us: float = 5.0
    loss_prob: float = 0.0
    duplicate_prob: float = 0.0
    reorder_jitter_us: float = 0.0
    loopback_fastpath: bool = True
    seed: int = 0

    bind: str = '127.0.0.1:7000'
    peers: List[str] = field(default_factory=list)
    data_dir: str = 'data'
    payload_cap: int = 60 * 1024

    recover_record_us: float = 2.0
    recover_cache_entry_us: float = 20.0

    def __post_init__(self):
        if self.quorum_variant not in QUORUM_VARIANTS:
            raise ConfigError(f"quorum_variant must be one of {QUORUM_VARIANTS}, got {self.quorum_variant!r}")
        if self.transport not in TRANSPORTS:
            raise ConfigError(f"transport must be one of {TRANSPORTS}, got {self.transport!r}")
        if not 0.0 <= self.loss_prob <= 1.0:
            raise ConfigError(f"loss_prob out of range: {self.loss_prob}")
        if self.backoff_factor < 1:
            raise ConfigError("backoff_factor must be >= 1")

    # --- Derived values ---
    @property
    def round_timeout_ns(self) -> int:
        ms = self.round_timeout_ms
        if ms is None:
            ms = 50.0 if self.transport == 'sim' else 200.0
        return int(ms * 1_000_000)

    @property
    def election_timeout_ns(self) -> int:
        if self.election_timeout_ms is None:
            return 4 * self.round_timeout_ns
        return int(self.election_timeout_ms * 1_000_000)

    @property
    def group_commit_ns(self) -> int:
        return int(self.group_commit_ms * 1_000_000)

    @property
    def max_batch_commands(self) -> int:
        # a put command encodes to 14 bytes, a batch header to 14
        return max(1, (self.max_batch_bytes - 14) // 14)

    @property
    def effective_pending_bound(self) -> int:
        if self.pending_bound is None:
            return 10 * self.max_batch_commands
        return self.pending_bound

    # --- Construction helpers ---
    @classmethod
    def from_mapping(cls, values: Dict[str, object], base: Optional['EngineConfig'] = None) -> 'EngineConfig':
        """Builds a config from string-ish values, on top of `base`."""
        known = {f.name: f for f in fields(cls)}
        parsed = {}
        for key, raw in values.items():
            name = key.strip().lower().replace('-', '_')
            if name not in known:
                raise ConfigError(f"unknown config key: {key}")
            parsed[name] = _coerce(name, known[name].type, raw)
        return replace(base or cls(), **parsed)

    @classmethod
    def from_env(cls, base: Optional['EngineConfig'] = None) -> 'EngineConfig':
        """Picks up any engine key present in the environment (upper-case name)."""
        values = {}
        for f in fields(cls):
            raw = os.environ.get(f.name.upper())
            if raw is not None:
                values[f.name] = raw
        return cls.from_mapping(values, base)

    @classmethod
    def load(cls, config_file: Optional[str] = None, overrides: Optional[Dict[str, object]] = None) -> 'EngineConfig':
        """defaults < config file < environment < explicit overrides"""
        config = cls()
        if config_file:
            config = cls.from_mapping(load_config_file(config_file), config)
        config = cls.from_env(config)
        if overrides:
            config = cls.from_mapping({k: v for k, v in overrides.items() if v is not None}, config)
        return config


def _coerce(name: str, annotation, raw):
    if raw is None:
        return None
    kind = str(annotation)
    try:
        if 'List' in kind:
            return _to_list(raw)
        if 'bool' in kind:
            return _to_bool(raw)
        if 'int' in kind and 'Optional' in kind:
            return int(raw)
        if 'float' in kind:
            return float(raw)
        if 'int' in kind:
            return int(raw)
        return str(raw).strip()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad value for {name}: {raw!r} ({e})")


def load_config_file(path: str) -> Dict[str, str]:
    """Parses `key = value` lines; blank lines and `#` comments are skipped."""
    values = {}
    with open(path, 'r', encoding='utf-8') as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = line.split('=', 1)
            values[key.strip()] = value.strip()
    return values
