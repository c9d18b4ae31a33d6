from .app import create_app, serve
from .store import Store
from .worker import WorkerPool

__all__ = ["create_app", "serve", "Store", "WorkerPool"]
