# vpgo/main.py
import logging
import time

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from vpgo import __version__
from vpgo.config import LOG_FORMAT, LOG_LEVEL
from vpgo.database import Base, engine
from vpgo.routes_actions import router as actions_router
from vpgo.routes_runs import router as runs_router

# ----- Logging setup -----
logging.basicConfig(level=LOG_LEVEL.upper(), format=LOG_FORMAT)
log = logging.getLogger("vpgo.api")

app = FastAPI(title="VP-GO inspection API", version=__version__)

app.include_router(actions_router)
app.include_router(runs_router)


@app.on_event("startup")
def startup_event():
    """Create registry tables if they don't exist."""
    from vpgo import records  # noqa: F401
    Base.metadata.create_all(bind=engine)
    log.info("Registry tables created/verified")


# Request logging middleware
@app.middleware("http")
async def log_requests(request: Request, call_next):
    start = time.time()
    log.info("REQ %s %s", request.method, request.url.path)
    try:
        response = await call_next(request)
        elapsed = (time.time() - start) * 1000
        log.info("RES %s %s -> %s in %.2f ms", request.method, request.url.path, response.status_code, elapsed)
        return response
    except Exception:  # pragma: no cover
        log.exception("Unhandled error on %s %s", request.method, request.url.path)
        return JSONResponse(status_code=500, content={"detail": "Internal Server Error"})


@app.get("/health")
def health():
    return {"status": "ok", "version": __version__}
