import os
from dotenv import load_dotenv

# Load environment variables
load_dotenv()


class ConfigError(ValueError):
    """Bad configuration key or value. `key` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


# -----------------------------
# Worker parallelism
# -----------------------------
# 0 = single-threaded deterministic mode
SPSNERF_THREADS = int(os.getenv("SPSNERF_THREADS", "0"))

# Rays per forward/backward chunk. Chunk boundaries fix the gradient
# reduction order, so results do not depend on SPSNERF_THREADS.
SPSNERF_CHUNK = int(os.getenv("SPSNERF_CHUNK", "256"))

# -----------------------------
# Logging
# -----------------------------
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()

# -----------------------------
# Validation (fail fast)
# -----------------------------
if SPSNERF_THREADS < 0:
    raise RuntimeError("SPSNERF_THREADS must be >= 0")

if SPSNERF_CHUNK < 1:
    raise RuntimeError("SPSNERF_CHUNK must be >= 1")


# -----------------------------
# key=value files
# -----------------------------
def read_key_values(path) -> dict:
    """
    Parse a plain-text key=value file.
    - one entry per line
    - '#' starts a comment
    - blank lines ignored
    Duplicate keys are errors.
    """
    with open(path, "r", encoding="utf-8") as fh:
        return parse_key_values(fh.read())


def parse_key_values(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}", "empty key")
        if key in values:
            raise ConfigError(key, "duplicate key")
        values[key] = value
    return values


def write_key_values(path, values: dict, header: str = None):
    """Write entries in insertion order. Floats use repr() so they read back bit-exact."""
    lines = []
    if header:
        lines.extend(f"# {h}" for h in header.splitlines())
    for key, value in values.items():
        if isinstance(value, float):
            value = repr(value)
        lines.append(f"{key}={value}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def coerce(key: str, value: str, kind):
    """Convert a raw string to `kind`, raising ConfigError naming the key."""
    try:
        if kind is bool:
            lowered = value.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(key, f"cannot parse {value!r} as {getattr(kind, '__name__', kind)}")
