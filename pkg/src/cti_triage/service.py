"""HTTP facade over the annotation queue, versioned under /v1.

All endpoints require a bearer token; request and response bodies use the
same wire shapes as the journal payloads. The service holds no truth of its
own: tasks come from the queue, taxonomy and instances from the providers
handed in by the pipeline.
"""

from __future__ import annotations

from typing import Callable, Optional

from fastapi import Depends, FastAPI, HTTPException, Query, Request

from .annotation import (
    AnnotationQueue,
    InvalidResolution,
    ResolutionConflict,
    TaskKind,
    TaskStatus,
    UnknownTask,
)
from .core import Taxonomy, ThreatInstance


def taxonomy_record(taxonomy: Taxonomy) -> dict:
    return {
        "version": taxonomy.version,
        "parent_version": taxonomy.parent_version,
        "modes": [
            {
                "mode_id": m.mode_id,
                "name": m.name,
                "category": m.category.value,
                "description": m.description,
                "stages": sorted(s.value for s in m.applicable_stages),
                "detection": m.detection,
            }
            for m in taxonomy.modes
        ],
    }


def create_app(
    queue: AnnotationQueue,
    token: str,
    taxonomy_provider: Callable[[], Taxonomy],
    instance_provider: Optional[Callable[[str], Optional[ThreatInstance]]] = None,
    run_status_provider: Optional[Callable[[str], Optional[dict]]] = None,
) -> FastAPI:
    app = FastAPI(title="cti-triage annotation service")

    def require_auth(request: Request):
        header = request.headers.get("authorization", "")
        if header != f"Bearer {token}":
            raise HTTPException(status_code=401, detail="missing or invalid bearer token")

    @app.get("/v1/tasks", dependencies=[Depends(require_auth)])
    def list_tasks(
        kind: Optional[str] = Query(default=None),
        status: Optional[str] = Query(default=None),
    ):
        try:
            kind_filter = TaskKind(kind) if kind is not None else None
            status_filter = TaskStatus(status) if status is not None else None
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        tasks = queue.list_tasks(kind=kind_filter, status=status_filter)
        return {"tasks": [t.summary() for t in tasks]}

    @app.get("/v1/tasks/{task_id}", dependencies=[Depends(require_auth)])
    def get_task(task_id: str):
        try:
            return queue.get(task_id).to_record()
        except UnknownTask:
            raise HTTPException(status_code=404, detail=f"unknown task {task_id}")

    @app.post("/v1/tasks/{task_id}/resolution", dependencies=[Depends(require_auth)])
    async def submit_resolution(task_id: str, request: Request):
        resolution = await request.json()
        if not isinstance(resolution, dict):
            raise HTTPException(status_code=422, detail="resolution must be an object")
        try:
            task = queue.submit_resolution(task_id, resolution)
        except UnknownTask:
            raise HTTPException(status_code=404, detail=f"unknown task {task_id}")
        except ResolutionConflict as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        except InvalidResolution as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return task.to_record()

    @app.get("/v1/taxonomy", dependencies=[Depends(require_auth)])
    def get_taxonomy():
        return taxonomy_record(taxonomy_provider())

    @app.get("/v1/runs/{run_id}/status", dependencies=[Depends(require_auth)])
    def run_status(run_id: str):
        if run_status_provider is None:
            raise HTTPException(status_code=404, detail="no runs directory configured")
        status = run_status_provider(run_id)
        if status is None:
            raise HTTPException(status_code=404, detail=f"unknown run {run_id}")
        return status

    @app.get("/v1/instances/{instance_id}", dependencies=[Depends(require_auth)])
    def get_instance(instance_id: str):
        if instance_provider is None:
            raise HTTPException(status_code=404, detail="no instance store configured")
        instance = instance_provider(instance_id)
        if instance is None:
            raise HTTPException(status_code=404, detail=f"unknown instance {instance_id}")
        from .ingestion import instance_to_record

        return instance_to_record(instance)

    return app
