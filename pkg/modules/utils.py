# modules/utils.py - Shared Utility Functions
import hashlib
import json
import logging
import re
import sys
from datetime import datetime
from logging.handlers import RotatingFileHandler
from typing import Any, Dict, Iterable, List

from pythonjsonlogger import jsonlogger

from config import config

# ========== LOGGING SETUP ==========

def setup_logging() -> logging.Logger:
    """
    Configure the pipeline logger.

    Console output goes to stderr so that JSON reports on stdout stay
    machine-readable. The rotating file log is written as JSON lines.

    Returns:
        Configured logger instance
    """
    logger = logging.getLogger('CorefWeave')
    logger.setLevel(getattr(logging, config.LOG_LEVEL.upper(), logging.INFO))

    # Avoid duplicate handlers
    if logger.handlers:
        return logger

    simple_formatter = logging.Formatter('%(levelname)s - %(message)s')

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(logging.INFO)
    console_handler.setFormatter(simple_formatter)
    logger.addHandler(console_handler)

    if config.LOG_FILE:
        json_formatter = jsonlogger.JsonFormatter(
            '%(asctime)s %(name)s %(levelname)s %(filename)s %(lineno)d %(message)s'
        )
        file_handler = RotatingFileHandler(
            config.LOG_FILE,
            maxBytes=config.LOG_MAX_BYTES,
            backupCount=config.LOG_BACKUP_COUNT,
            encoding='utf-8'
        )
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(json_formatter)
        logger.addHandler(file_handler)

    return logger

# Global logger instance
logger = setup_logging()

# ========== TEXT PROCESSING ==========

def normalize_surface(text: str) -> str:
    """
    Normalize a mention surface for matching: collapse whitespace, case-fold.

    Args:
        text: Raw surface string (possibly model-generated)

    Returns:
        Normalized string
    """
    if not text:
        return ""
    return re.sub(r'\s+', ' ', text).strip().casefold()

def normalize_text(text: str) -> str:
    """Collapse every whitespace run (newlines included) into one space."""
    return re.sub(r'\s+', ' ', text or '').strip()

# ========== HASHING ==========

def stable_seed(*parts: Any) -> int:
    """
    Derive a 64-bit seed from arbitrary parts, stable across processes.

    Python's built-in hash() is salted per process, so it cannot be used
    for reproducible per-record random streams.
    """
    digest = hashlib.blake2b(digest_size=8)
    for part in parts:
        digest.update(str(part).encode('utf-8'))
        digest.update(b'\x1f')
    return int.from_bytes(digest.digest(), 'big')

# ========== JSONL I/O ==========

def read_jsonl(path: str) -> List[Dict]:
    """
    Read a JSON-lines file, skipping blank lines.

    Raises:
        MalformedLine: when a line is not valid JSON (1-based line number)
    """
    rows = []
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise MalformedLine(f"{path}:{line_no}: invalid JSON ({e.msg})") from e
    return rows

def write_jsonl(path: str, rows: Iterable[Dict]) -> int:
    """Write rows as JSON lines; returns the number of rows written."""
    count = 0
    with open(path, 'w', encoding='utf-8') as f:
        for row in rows:
            f.write(json.dumps(row, ensure_ascii=False))
            f.write('\n')
            count += 1
    return count

def dump_json(payload: Any) -> str:
    """Deterministic pretty JSON used for every report."""
    return json.dumps(payload, ensure_ascii=False, indent=2)

# ========== FORMAT CONVERSION ==========

def format_duration(seconds: float) -> str:
    """
    Format duration in human-readable format.

    Args:
        seconds: Duration in seconds

    Returns:
        Formatted string (e.g., "2m 30s")
    """
    if seconds < 60:
        return f"{seconds:.1f}s"
    elif seconds < 3600:
        minutes = int(seconds // 60)
        secs = int(seconds % 60)
        return f"{minutes}m {secs}s"
    else:
        hours = int(seconds // 3600)
        minutes = int((seconds % 3600) // 60)
        return f"{hours}h {minutes}m"

# ========== ERROR HANDLING ==========

class CorefWeaveError(Exception):
    """Base class for every error raised by the pipeline."""
    pass

class ConfigError(CorefWeaveError):
    """Invalid run configuration or CLI arguments."""
    pass

# --- corpus ---

class CorpusError(CorefWeaveError):
    """Custom exception for corpus parsing and validation errors."""
    pass

class UnbalancedSpan(CorpusError):
    pass

class MalformedLine(CorpusError):
    pass

class EmptyDocument(CorpusError):
    pass

class MissingClustering(CorpusError):
    pass

class CrossSentenceMention(CorpusError):
    pass

class SchemaViolation(CorpusError):
    """Canonical JSON violation; `path` is a JSON-pointer to the offending value."""

    def __init__(self, path: str, message: str):
        self.path = path or '/'
        self.message = message
        super().__init__(f"{self.path}: {message}")

# --- templates ---

class TemplateError(CorefWeaveError):
    """Custom exception for prompt construction and answer parsing errors."""
    pass

class UnknownMention(TemplateError):
    pass

class NoMentionsInSentence(TemplateError):
    pass

class MissingMentions(TemplateError):
    pass

class StepOutOfRange(TemplateError):
    pass

class AssignedLengthMismatch(TemplateError):
    pass

class Unparseable(TemplateError):
    pass

class MissingGoldAnswer(TemplateError):
    pass

# --- backend ---

class BackendError(CorefWeaveError):
    """Custom exception for completion backend errors."""
    pass

class TransportError(BackendError):
    """Network failure or HTTP error status; `attempts` counts the requests made."""

    def __init__(self, message: str, attempts: int = 1):
        self.attempts = attempts
        super().__init__(message)

class AuthMissing(BackendError):
    pass

class BadResponse(BackendError):
    pass

class UnknownRecordMode(BackendError):
    pass

# --- joint / docgen / scorer ---

class JointError(CorefWeaveError):
    pass

class DocMismatch(JointError):
    pass

class DocgenError(CorefWeaveError):
    pass

class BackendFailure(DocgenError):
    pass

class MalformedMarkup(DocgenError):
    pass

class ScorerError(CorefWeaveError):
    pass

class MentionUniverseMismatch(ScorerError):
    pass

class DocKeyMismatch(ScorerError):
    pass

# ========== PROGRESS TRACKING ==========

class ProgressTracker:
    """Simple progress tracking utility; logs roughly every `log_every` percent."""

    def __init__(self, total: int, description: str = "Processing", log_every: float = 10.0):
        self.total = total
        self.current = 0
        self.description = description
        self.log_every = log_every
        self._next_mark = log_every
        self.start_time = datetime.now()

    def update(self, increment: int = 1):
        """Update progress."""
        self.current += increment
        percentage = (self.current / self.total) * 100 if self.total > 0 else 100.0
        if percentage < self._next_mark and self.current < self.total:
            return
        while self._next_mark <= percentage:
            self._next_mark += self.log_every

        elapsed = (datetime.now() - self.start_time).total_seconds()
        eta = (elapsed / self.current) * (self.total - self.current) if self.current else 0.0
        logger.info(f"{self.description}: {self.current}/{self.total} ({percentage:.1f}%) - ETA: {format_duration(eta)}")

    def complete(self):
        """Mark as complete."""
        elapsed = (datetime.now() - self.start_time).total_seconds()
        logger.info(f"{self.description}: Completed {self.total} items in {format_duration(elapsed)}")
