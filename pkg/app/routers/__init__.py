from .experiments import router as experiments_router
from .gkls import router as gkls_router

__all__ = ['experiments_router', 'gkls_router']
