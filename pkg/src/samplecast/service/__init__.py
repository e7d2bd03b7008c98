"""FastAPI service wrapping the simulation core.

The CLI talks to this app in-process through an ASGI transport by
default; `samplecast serve` exposes the same app over the network for
shared use.
"""

from __future__ import annotations

from fastapi import FastAPI

from .routes import router


def create_app() -> FastAPI:
    app = FastAPI(
        title="samplecast",
        description="Deadline-constrained fragmented-sample transport simulator",
    )
    app.include_router(router)
    return app
