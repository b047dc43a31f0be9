"""Interactive render service.

Serves the static viewer bundle at `/`, scene metadata at `/meta`, and a
WebSocket at `/ws`.  Clients send JSON view requests; the server answers
each with one binary frame: a 16-byte header (magic ``PYFR``, request id
u32, width u32, height u16, format u8 {0 = PNG color, 1 = PNG overlay},
one reserved byte) followed by a PNG payload.  Requests arriving while a
render is in flight are coalesced: only the newest is rendered.
"""

from __future__ import annotations

import asyncio
import io
import json
import struct
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from . import dataio, scene
from .geom import Camera
from .scene import SceneModel

FRAME_MAGIC = b"PYFR"
FORMAT_COLOR = 0
FORMAT_OVERLAY = 1
MAX_WIDTH = 1920
MAX_HEIGHT = 1080

_FALLBACK_PAGE = """<!doctype html>
<html><body><h1>pyrsplat render service</h1>
<p>No viewer bundle found. Build the frontend (see README) and restart with
--static-dir, or talk to <code>/ws</code> directly.</p></body></html>"""


def snapshot_scene(model: SceneModel) -> SceneModel:
    """Immutable render snapshot: later mutation of the source is invisible."""
    return model.snapshot()


def parse_view_request(msg: dict) -> dict:
    """Validate a view message; raises ValueError with a reason."""
    if msg.get("type") != "view":
        raise ValueError(f"unknown message type {msg.get('type')!r}")
    req_id = int(msg["id"])
    width = int(msg["width"])
    height = int(msg["height"])
    if width <= 0 or height <= 0:
        raise ValueError("width*height must be positive")
    if width > MAX_WIDTH or height > MAX_HEIGHT:
        raise ValueError(f"resolution above {MAX_WIDTH}x{MAX_HEIGHT}")
    c2w = np.asarray(msg["camera_to_world"], dtype=np.float64)
    if c2w.size != 16:
        raise ValueError("camera_to_world must have 16 entries")
    fov = float(msg["fov_y"])
    if not 0.01 < fov < 3.1:
        raise ValueError("fov_y out of range")
    overlay = msg.get("overlay", "none")
    if overlay not in ("none", "dominant", "mass"):
        raise ValueError(f"unknown overlay mode {overlay!r}")
    return {
        "id": req_id,
        "c2w": c2w.reshape(4, 4),
        "fov_y": fov,
        "width": width,
        "height": height,
        "overlay": overlay,
        "overlay_level": int(msg.get("overlay_level", 1)),
        "levels_mask": int(msg.get("levels_mask", -1)),
        "appearance": int(msg.get("appearance", -1)),
        "color_correction": bool(msg.get("color_correction", True)),
    }


def render_request(model: SceneModel, req: dict) -> bytes:
    """Render one validated request into a framed binary message."""
    fy = req["height"] / (2.0 * np.tan(req["fov_y"] / 2.0))
    cam = Camera(
        w2c=np.linalg.inv(req["c2w"]),
        fx=fy, fy=fy,
        cx=req["width"] / 2.0, cy=req["height"] / 2.0,
        width=req["width"], height=req["height"],
    )
    mask = None
    if req["levels_mask"] >= 0:
        mask = np.array(
            [bool(req["levels_mask"] >> lvl & 1) for lvl in range(model.n_levels)]
        )
    appearance = req["appearance"] if req["appearance"] >= 0 else None
    out, _ = scene.render_view(
        model, cam,
        appearance_index=appearance,
        enabled_levels=mask,
        correction=req["color_correction"],
    )
    if req["overlay"] == "none":
        u8 = np.round(dataio.linear_to_srgb(out.image) * 255.0).astype(np.uint8)
        img = Image.fromarray(u8)
        fmt = FORMAT_COLOR
    elif req["overlay"] == "dominant":
        img = Image.fromarray(out.dominant_level.astype(np.uint8), mode="L")
        fmt = FORMAT_OVERLAY
    else:
        lvl = min(max(req["overlay_level"], 1), model.n_levels)
        mass = np.clip(out.level_mass[:, :, lvl - 1], 0.0, 1.0)
        img = Image.fromarray(np.round(mass * 255.0).astype(np.uint8), mode="L")
        fmt = FORMAT_OVERLAY
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    header = FRAME_MAGIC + struct.pack(
        "<IIHBB", req["id"], req["width"], req["height"], fmt, 0
    )
    return header + buf.getvalue()


def build_meta(model: SceneModel, cameras: list[dict] | None) -> dict:
    return {
        "levels": model.n_levels,
        "clusters": model.n_clusters,
        "camera_count": len(cameras or []),
        "aabb": model.aabb.tolist(),
        "cameras": cameras or [],
    }


def create_app(checkpoint: dataio.Checkpoint, static_dir: str | None = None,
               workers: int = 2):
    """FastAPI application speaking the viewer protocol."""
    from fastapi import FastAPI, WebSocket, WebSocketDisconnect
    from fastapi.responses import FileResponse, HTMLResponse, JSONResponse

    model = snapshot_scene(checkpoint.model)
    cameras = (checkpoint.config or {}).get("cameras", [])
    pool = ThreadPoolExecutor(max_workers=workers)
    app = FastAPI()
    static = Path(static_dir) if static_dir else None

    @app.get("/meta")
    def meta():
        return JSONResponse(build_meta(model, cameras))

    @app.get("/")
    def index():
        if static and (static / "index.html").exists():
            return FileResponse(static / "index.html")
        return HTMLResponse(_FALLBACK_PAGE)

    @app.get("/{name:path}")
    def assets(name: str):
        if static:
            target = (static / name).resolve()
            if target.is_file() and target.is_relative_to(static.resolve()):
                return FileResponse(target)
        return HTMLResponse(_FALLBACK_PAGE, status_code=404)

    @app.websocket("/ws")
    async def ws_endpoint(ws: WebSocket):
        await ws.accept()
        loop = asyncio.get_running_loop()
        pending: list = [None]
        kick = asyncio.Event()

        async def worker():
            while True:
                await kick.wait()
                kick.clear()
                while pending[0] is not None:
                    req = pending[0]
                    pending[0] = None
                    try:
                        payload = await loop.run_in_executor(
                            pool, render_request, model, req
                        )
                    except Exception as exc:  # render failure -> error message
                        await ws.send_text(json.dumps(
                            {"type": "error", "id": req["id"], "reason": str(exc)}
                        ))
                        continue
                    await ws.send_bytes(payload)

        task = asyncio.create_task(worker())
        try:
            while True:
                text = await ws.receive_text()
                try:
                    req = parse_view_request(json.loads(text))
                except (ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
                    rid = None
                    try:
                        rid = json.loads(text).get("id")
                    except Exception:
                        pass
                    await ws.send_text(json.dumps(
                        {"type": "error", "id": rid, "reason": str(exc)}
                    ))
                    continue
                pending[0] = req  # latest wins
                kick.set()
        except WebSocketDisconnect:
            pass
        finally:
            task.cancel()

    return app


def serve(checkpoint: dataio.Checkpoint, host: str = "127.0.0.1",
          port: int = 8000, static_dir: str | None = None,
          workers: int = 2) -> None:
    """Run the service until interrupted."""
    import uvicorn

    if static_dir is None:
        bundled = Path(__file__).resolve().parents[2] / "frontend" / "dist"
        if bundled.exists():
            static_dir = str(bundled)
    app = create_app(checkpoint, static_dir=static_dir, workers=workers)
    uvicorn.run(app, host=host, port=port, log_level="warning")
