import hashlib
import logging
import os
import re
import tempfile
from pathlib import Path
from typing import Iterable, Set

from constants import EXIT_INVARIANT, EXIT_MALFORMED


# alphanumeric run | underscore | any other non-space symbol
_TOKEN_RE = re.compile(r"[^\W_]+|_|[^\w\s]")
_ALNUM_RE = re.compile(r"[^\W_]+")

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
LOG_DATEFMT = "%Y-%m-%d %H:%M:%S"


class LssError(Exception):
    """Base class for every kernel error."""
    exit_code = EXIT_INVARIANT


class InputError(LssError):
    """Malformed input, unknown ids, bad arguments."""
    exit_code = EXIT_MALFORMED


class InvariantError(LssError):
    """A kernel invariant would be (or was) violated."""
    exit_code = EXIT_INVARIANT


def configure_logging(level: int = logging.WARNING) -> None:
    logging.basicConfig(level=level, format=LOG_FORMAT, datefmt=LOG_DATEFMT)


def token_spans(text: str) -> Iterable[re.Match]:
    return _TOKEN_RE.finditer(text)


def count_tokens(text: str) -> int:
    """
    Maximal alphanumeric runs plus every non-whitespace, non-alphanumeric
    character.
    """
    if not text:
        return 0
    return sum(1 for _ in _TOKEN_RE.finditer(text))


def lexical_tokens(text: str) -> Set[str]:
    """Unique lowercase alphanumeric tokens."""
    return {m.lower() for m in _ALNUM_RE.findall(text)}


def overlap_score(left: str, right: str) -> int:
    return len(lexical_tokens(left) & lexical_tokens(right))


def normalize_whitespace(text: str) -> str:
    return " ".join(text.split())


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def escape_field(value: str) -> str:
    """Make a value safe for one tab-separated field."""
    return (
        value.replace("\\", "\\\\")
        .replace("\t", "\\t")
        .replace("\n", "\\n")
        .replace("\r", "\\r")
    )


def unescape_field(value: str) -> str:
    out = []
    i = 0
    while i < len(value):
        ch = value[i]
        if ch == "\\" and i + 1 < len(value):
            nxt = value[i + 1]
            out.append({"t": "\t", "n": "\n", "r": "\r", "\\": "\\"}.get(nxt, nxt))
            i += 2
            continue
        out.append(ch)
        i += 1
    return "".join(out)


def atomic_write(path: Path, data: str) -> None:
    """Write through a temp file in the same directory, then rename."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=str(path.parent), prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(data)
        os.replace(tmp, path)
    except Exception:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def store_digest(root: Path) -> str:
    """Hash of every file (relative path + bytes) under a store root."""
    root = Path(root)
    digest = hashlib.sha256()
    if not root.exists():
        return digest.hexdigest()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        digest.update(str(path.relative_to(root)).encode("utf-8"))
        digest.update(b"\0")
        digest.update(path.read_bytes())
        digest.update(b"\0")
    return digest.hexdigest()
