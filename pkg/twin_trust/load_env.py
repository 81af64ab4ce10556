import os
from pathlib import Path

from dotenv import load_dotenv

# Resolve the project-root .env file
root_env_path = Path(__file__).resolve().parent.parent / ".env"

load_dotenv(dotenv_path=root_env_path)

# Normalize the verbosity variable; LOG_LEVEL is accepted as a fallback name
os.environ["TWIN_TRUST_LOG"] = os.getenv("TWIN_TRUST_LOG", os.getenv("LOG_LEVEL", "WARNING"))
