"""
The replicated hash table driven through the state-machine interface.
"""
import hashlib
import threading
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional

from models import Command
from wire import encode_command

INITIAL_DIGEST = hashlib.sha256(b'hashtable/v1').digest()


@dataclass
class TableState:
    entries: Dict[int, str] = field(default_factory=dict)
    applied_count: int = 0
    digest: bytes = INITIAL_DIGEST
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)


def apply(state: TableState, c: Command) -> TableState:
    """Applies a put in place and chains the command into the state digest."""
    with state._lock:
        state.entries[c.key] = c.value
        state.applied_count += 1
        state.digest = hashlib.sha256(state.digest + encode_command(c)).digest()
    return state


def apply_all(state: TableState, commands: Iterable[Command]) -> TableState:
    for c in commands:
        apply(state, c)
    return state


def read(state: TableState, key: int) -> Optional[str]:
    # Local read; never goes through consensus.
    return state.entries.get(key)


def state_digest(state: TableState) -> bytes:
    with state._lock:
        return state.digest
