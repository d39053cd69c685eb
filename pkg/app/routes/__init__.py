from .runs import router as runs_router
from .federation import router as federation_router
