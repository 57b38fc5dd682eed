import os
import sys
from pathlib import Path, PureWindowsPath

# External dependencies (assumes venv is active)
try:
    from dotenv import load_dotenv
except ImportError:
    print("Error: 'python-dotenv' is required. Please install it via 'pip install -r scripts/requirements.txt'")
    exit(1)

if sys.version_info >= (3, 11):
    import tomllib
else:
    try:
        import tomli as tomllib
    except ImportError:
        print("Error: 'tomli' is required on Python < 3.11. Please install it via 'pip install -r scripts/requirements.txt'")
        exit(1)

from lib.errors import ConfigError

# -----------------------------------------------------------------------------
# Configuration & Path Resolution
# -----------------------------------------------------------------------------
SCRIPT_DIR = Path(__file__).resolve().parent
PROJECT_ROOT = SCRIPT_DIR.parent
ENV_FILE = PROJECT_ROOT / ".env"

# Load environment variables
if ENV_FILE.exists():
    load_dotenv(ENV_FILE)
    print(f"Loaded config from {ENV_FILE}")


def get_workspace_path():
    """Resolve output directory from root .env or fallback."""
    workspace_path = os.environ.get("WORKSPACE_PATH")

    if workspace_path:
        # Handle Windows paths (e.g. D:\Runs) when running in POSIX (WSL/Mac)
        if os.name == "posix" and (":" in workspace_path or "\\" in workspace_path):
            try:
                win_path = PureWindowsPath(workspace_path)
                if win_path.drive:
                    drive_letter = win_path.drive.rstrip(":").lower()
                    rel_path = win_path.relative_to(win_path.anchor).as_posix()
                    return Path(f"/mnt/{drive_letter}/{rel_path}")
                return Path(win_path.as_posix())
            except ValueError:
                pass

        return Path(workspace_path)

    return PROJECT_ROOT / "data"


def get_default_seed():
    """KVDESK_SEED from the environment, or None when unset."""
    raw = os.environ.get("KVDESK_SEED")
    if raw is None or raw == "":
        return None
    try:
        seed = int(raw)
    except ValueError:
        raise ConfigError(f"KVDESK_SEED must be a non-negative integer, got '{raw}'") from None
    if seed < 0:
        raise ConfigError(f"KVDESK_SEED must be a non-negative integer, got '{raw}'")
    return seed


WORKSPACE_PATH = get_workspace_path()


# -----------------------------------------------------------------------------
# Config files
# -----------------------------------------------------------------------------
def load_config_file(path):
    """Parsed TOML engine config (section -> dict). A missing path yields an empty config."""
    if path is None:
        return {}
    path = Path(path)
    try:
        with path.open("rb") as f:
            raw = tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"invalid TOML in {path}: {e}") from e

    for section, values in raw.items():
        if not isinstance(values, dict):
            raise ConfigError(f"top-level key '{section}' in {path} must be a [section]")
    return raw


def resolve_output(path, default_name):
    """Bare file names land in the workspace directory."""
    if path is None:
        return WORKSPACE_PATH / default_name
    path = Path(path)
    return path if path.is_absolute() or path.parent != Path(".") else WORKSPACE_PATH / path
