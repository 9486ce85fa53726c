# lib/config_schema.py
"""
Defines the configuration data structures and the main setup logic for the application.
"""
import dataclasses
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

# --- Helpers ---

def parse_address(text: str) -> Tuple[str, int]:
    """'host:port' -> (host, port). An empty host means loopback."""
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit() or int(port) > 65535:
        raise ValueError(f"Address '{text}' is not of the form host:port.")
    return host or "127.0.0.1", int(port)

def _address_errors(name: str, value: str) -> List[str]:
    try:
        parse_address(value)
        return []
    except ValueError as e:
        return [f"{name}: {e}"]

# --- Data Structures for Configuration ---

@dataclass
class ChannelConfig:
    """Secure log channel settings."""
    timeout: float = 5.0  # seconds of silence before a session is untrusted
    dummy_packets: bool = False  # side-channel mitigation: random authenticated dummies
    dummy_k_max: int = 0
    dummy_t_max: float = 0.0  # seconds

    def validate(self) -> List[str]:
        errors = []
        if self.timeout <= 0: errors.append("channel.timeout must be positive.")
        if self.dummy_k_max < 0: errors.append("channel.dummy_k_max cannot be negative.")
        if self.dummy_t_max < 0: errors.append("channel.dummy_t_max cannot be negative.")
        if self.dummy_packets and self.dummy_k_max == 0:
            errors.append("channel.dummy_packets is on but channel.dummy_k_max is 0.")
        return errors

@dataclass
class ExtractorConfig:
    """Model extraction settings."""
    timeout: float = 10.0  # seconds per function before the insensitive fallback
    path_cap: int = 10000
    loop_bound: int = 3
    force_insensitive: bool = False
    workers: int = 1

    def validate(self) -> List[str]:
        errors = []
        if self.timeout <= 0: errors.append("extractor.timeout must be positive.")
        if self.path_cap < 1: errors.append("extractor.path_cap must be at least 1.")
        if self.loop_bound < 1: errors.append("extractor.loop_bound must be at least 1.")
        if self.workers < 1: errors.append("extractor.workers must be at least 1.")
        return errors

@dataclass
class MonitorConfig:
    """Monitor service settings."""
    listen: str = "127.0.0.1:7700"
    status_listen: str = "127.0.0.1:7701"
    model_path: Optional[str] = None
    key_file: str = "monitor.key"
    timeout: float = 5.0  # seconds
    queue_capacity: int = 1024  # receive batches of up to 1024 packets each
    log_dir: str = "log"
    keep_reading_untrusted: bool = True  # keep logging provenance after a session turns untrusted

    def validate(self) -> List[str]:
        errors = _address_errors("monitor.listen", self.listen)
        errors += _address_errors("monitor.status_listen", self.status_listen)
        if self.timeout <= 0: errors.append("monitor.timeout must be positive.")
        if self.queue_capacity < 1: errors.append("monitor.queue_capacity must be at least 1.")
        if not self.key_file: errors.append("monitor.key_file is required.")
        return errors

@dataclass
class TargetConfig:
    """Simulated target settings."""
    monitor: str = "127.0.0.1:7700"
    threads: int = 1
    schedule_file: Optional[str] = None
    transcript: Optional[str] = None  # write decrypted action logs here
    max_exception_retries: int = 3
    max_call_depth: int = 256

    def validate(self) -> List[str]:
        errors = _address_errors("target.monitor", self.monitor)
        if self.threads < 1: errors.append("target.threads must be at least 1.")
        if self.max_exception_retries < 1: errors.append("target.max_exception_retries must be at least 1.")
        if self.max_call_depth < 1: errors.append("target.max_call_depth must be at least 1.")
        return errors

@dataclass
class AppConfig:
    """Main application configuration container."""
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    monitor: MonitorConfig = field(default_factory=MonitorConfig)
    target: TargetConfig = field(default_factory=TargetConfig)

    def validate_fully(self) -> None:
        errors = []
        for section in (self.channel, self.extractor, self.monitor, self.target):
            errors.extend(section.validate())
        if errors:
            raise ValueError(f"AppConfig validation failed:\n - " + "\n - ".join(errors))

    @property
    def dummy_params(self) -> Tuple[int, float]:
        """(k_max, t_max) as the reporter should use them; (0, 0) while the mitigation is off."""
        if not self.channel.dummy_packets:
            return 0, 0.0
        return self.channel.dummy_k_max, self.channel.dummy_t_max


# --- Config files ---

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}

def _coerce(raw: str, current, name: str):
    """Converts raw text to the type of the field's current value."""
    if raw.lower() in ("none", "") and not isinstance(current, (bool, int, float)):
        return None
    if isinstance(current, bool):
        low = raw.lower()
        if low in _TRUE: return True
        if low in _FALSE: return False
        raise ValueError(f"{name}: expected a boolean, got '{raw}'.")
    if isinstance(current, int):
        try: return int(raw, 0)
        except ValueError: raise ValueError(f"{name}: expected an integer, got '{raw}'.")
    if isinstance(current, float):
        try: return float(raw)
        except ValueError: raise ValueError(f"{name}: expected a number, got '{raw}'.")
    return raw

def load_config_file(path: str, settings: AppConfig) -> AppConfig:
    """
    Applies a key=value file onto settings. Keys are 'section.field'; a bare
    field name addresses the monitor section. '#' starts a comment.
    """
    errors = []
    with open(path, "r", encoding="utf-8") as f:
        lines = f.readlines()
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line: continue
        key, sep, value = line.partition("=")
        if not sep:
            errors.append(f"line {lineno}: expected key=value, got '{line}'.")
            continue
        section_name, dot, field_name = key.strip().rpartition(".")
        section_name = section_name if dot else "monitor"
        section = getattr(settings, section_name, None)
        if not dataclasses.is_dataclass(section) or field_name not in {f.name for f in dataclasses.fields(section)}:
            errors.append(f"line {lineno}: unknown setting '{key.strip()}'.")
            continue
        try:
            setattr(section, field_name, _coerce(value.strip(), getattr(section, field_name), key.strip()))
        except ValueError as e:
            errors.append(f"line {lineno}: {e}")
    if errors:
        raise ValueError(f"Config file '{path}' is invalid:\n - " + "\n - ".join(errors))
    return settings


# --- Top-Level Setup Function (Called from config.py) ---
def setup_app_config(base_settings: AppConfig) -> AppConfig:
    """
    Validates the project defaults and returns the finalized settings.
    Exits on failure: a broken config.py is not something the CLI can recover from.
    """
    try:
        base_settings.validate_fully()
        return base_settings
    except ValueError as e:
        exit(f"--- FATAL CONFIGURATION SETUP ERROR ---\n"
             f"Error details: {e}\n"
             f"Please check 'config.py'.\n"
             f"---------------------------------")
