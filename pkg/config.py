# config.py - Pipeline Configuration for LLM Coreference Resolution
import os
from dataclasses import dataclass

from dotenv import load_dotenv

load_dotenv()


def _env_str(name: str, default: str) -> str:
    return os.environ.get(f"COREF_{name}", default)


def _env_int(name: str, default: int) -> int:
    return int(os.environ.get(f"COREF_{name}", default))


def _env_float(name: str, default: float) -> float:
    return float(os.environ.get(f"COREF_{name}", default))


def _env_bool(name: str, default: bool) -> bool:
    value = os.environ.get(f"COREF_{name}")
    if value is None:
        return default
    return value.strip().lower() in ("1", "true", "yes", "on")


@dataclass
class Config:
    """Defaults for every pipeline stage; overridable via COREF_* variables."""

    # ========== BACKEND SETTINGS ==========
    # Ollama exposes an OpenAI-compatible route under /v1
    LLM_BASE_URL: str = _env_str("LLM_BASE_URL", "http://localhost:11434/v1")
    LLM_MODEL: str = _env_str("LLM_MODEL", "llama3.2:latest")
    LLM_API_KEY_ENV: str = _env_str("LLM_API_KEY_ENV", "OPENAI_API_KEY")
    LLM_TEMPERATURE: float = _env_float("LLM_TEMPERATURE", 0.0)
    LLM_MAX_TOKENS: int = _env_int("LLM_MAX_TOKENS", 512)
    LLM_TIMEOUT: float = _env_float("LLM_TIMEOUT", 120.0)
    LLM_MAX_RETRIES: int = _env_int("LLM_MAX_RETRIES", 3)
    LLM_BACKOFF_BASE: float = _env_float("LLM_BACKOFF_BASE", 1.0)
    LLM_PARALLELISM: int = _env_int("LLM_PARALLELISM", 4)

    # ========== TEMPLATE SETTINGS ==========
    CHAIN_LEN: int = _env_int("CHAIN_LEN", 2)  # "the two most recent mentions"
    BACKWARD_CHAIN: bool = _env_bool("BACKWARD_CHAIN", True)
    INSTRUCTIONS_DIR: str = _env_str("INSTRUCTIONS_DIR", "prompts")

    # ========== JOINT INFERENCE SETTINGS ==========
    CHAIN_THRESHOLD: float = _env_float("CHAIN_THRESHOLD", 2.0)
    FOUND_THRESHOLD: float = _env_float("FOUND_THRESHOLD", 2.0)

    # ========== DOCUMENT GENERATION SETTINGS ==========
    ITER_CONTEXT_MODE: str = _env_str("ITER_CONTEXT_MODE", "previous_sentence")
    ITER_MAX_TOKENS: int = _env_int("ITER_MAX_TOKENS", 8)
    MAX_PROMPT_CHARS: int = _env_int("MAX_PROMPT_CHARS", 24000)

    # ========== CORPUS SETTINGS ==========
    KEEP_NON_REFERRING: bool = _env_bool("KEEP_NON_REFERRING", False)

    # ========== LOGGING ==========
    LOG_FILE: str = _env_str("LOG_FILE", "corefweave.log")
    LOG_MAX_BYTES: int = 10 * 1024 * 1024
    LOG_BACKUP_COUNT: int = 5
    LOG_LEVEL: str = _env_str("LOG_LEVEL", "INFO")

    def __post_init__(self):
        """Create the log directory if the log file lives in one."""
        log_dir = os.path.dirname(self.LOG_FILE)
        if log_dir:
            os.makedirs(log_dir, exist_ok=True)


config = Config()
