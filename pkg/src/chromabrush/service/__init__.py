"""HTTP service wrapper around the colorization engine.

Run it with uvicorn::

    CHROMABRUSH_WEIGHTS=weights.vggw uvicorn --factory chromabrush.service:create_app
"""

from .app import create_app, default_engine  # noqa: F401
from .jobs import EngineContext, JobManager  # noqa: F401
