import hashlib
import math
import re
from typing import Any, List, Sequence

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15

# =============================================================================
# DETERMINISTIC RANDOM STREAMS
# =============================================================================

def _splitmix_output(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)

def mix64(x: int) -> int:
    """One SplitMix64 step applied to x as the state"""
    return _splitmix_output((x + GOLDEN_GAMMA) & MASK64)

def derive_state(seed: int, t: int, key: int) -> int:
    """Fold (seed, t, key) into a single 64-bit SplitMix64 state"""
    state = mix64(seed & MASK64)
    state = mix64(state ^ (t & MASK64))
    return mix64(state ^ (key & MASK64))

class SplitMix64:
    """SplitMix64 generator; bit-exact with the reference C implementation"""

    __slots__ = ("state",)

    def __init__(self, state: int):
        self.state = state & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return _splitmix_output(self.state)

    def uniform(self) -> float:
        """Uniform float in [0, 1) from the top 53 bits"""
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def bounded(self, bound: int) -> int:
        """Unbiased integer in [0, bound) by rejection"""
        if bound <= 0:
            raise ValueError(f"bound must be positive, got {bound}")
        threshold = ((1 << 64) - bound) % bound
        while True:
            x = self.next_u64()
            if x >= threshold:
                return x % bound

    def gaussian(self) -> float:
        """Standard normal draw (Box-Muller, cosine branch)"""
        u1 = self.uniform()
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(1.0 - u1)) * math.cos(2.0 * math.pi * u2)

    def sample_indices(self, n: int, k: int) -> List[int]:
        """First k entries of a Fisher-Yates shuffle of range(n).

        Only touched positions are materialized, so the cost is O(k) rather than O(n).
        """
        swapped = {}
        chosen = []
        for r in range(k):
            j = r + self.bounded(n - r)
            chosen.append(swapped.get(j, j))
            swapped[j] = swapped.get(r, r)
        return chosen

class KeyedStream:
    """Factory of independent SplitMix64 streams keyed by (seed, t, key)"""

    def __init__(self, seed: int):
        self.seed = seed & MASK64

    def stream(self, t: int, key: int) -> SplitMix64:
        return SplitMix64(derive_state(self.seed, t, key))

# =============================================================================
# SERIALIZATION
# =============================================================================

def format_float(value: float) -> str:
    """Render a finite double with 17 significant digits"""
    value = float(value)
    if not math.isfinite(value):
        raise ValueError(f"cannot serialize non-finite value {value!r}")
    return format(value, ".17g")

def render_json(data: Any) -> str:
    """Render a JSON document with every real as a 17-significant-digit double"""
    if data is None:
        return "null"
    if isinstance(data, (bool, np.bool_)):
        return "true" if data else "false"
    if isinstance(data, (int, np.integer)):
        return str(int(data))
    if isinstance(data, (float, np.floating)):
        return format_float(data)
    if isinstance(data, str):
        return '"' + data.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n") + '"'
    if isinstance(data, dict):
        items = ", ".join(f"{render_json(str(key))}: {render_json(value)}" for key, value in data.items())
        return "{" + items + "}"
    if isinstance(data, (list, tuple, np.ndarray)):
        return "[" + ", ".join(render_json(value) for value in data) + "]"
    raise TypeError(f"cannot serialize {type(data).__name__}")

# =============================================================================
# FILES
# =============================================================================

def sanitize_filename(filename: str) -> str:
    """Sanitize filename for safe storage"""
    sanitized = re.sub(r'[<>:"/\\|?*=,;\s]', '_', filename)
    if len(sanitized) > 200:
        sanitized = sanitized[:200]
    return sanitized

def generate_config_hash(content: str) -> str:
    """Short content hash identifying a rendered configuration"""
    return hashlib.sha256(content.encode("utf-8")).hexdigest()[:16]

def format_params(params: Sequence) -> str:
    """Render (name, value) pairs as 'a=1;b=2'"""
    return ";".join(f"{name}={value:g}" if isinstance(value, float) else f"{name}={value}" for name, value in params)
