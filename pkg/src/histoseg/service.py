"""Single-session HTTP service driving the human-in-the-loop review loop.

Endpoints (JSON unless noted):
  GET  /api/session               slide metadata, round index, Dice log
  GET  /api/patches[?round=r]     patch grid with predictions, entropies,
                                  human labels, and 64x64 PNG thumbnails
  POST /api/annotations           list of {patch_id, class_index, timestamp}
  POST /api/round                 apply queued annotations and run one round
  GET  /api/mask?level=patch|pixel  current mask as a grayscale PNG body

Reads are served concurrently; round execution is exclusive (a concurrent
round request gets 409). Annotation posts queue and are applied atomically
when the next round starts.
"""

from __future__ import annotations

import base64
import io
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
from PIL import Image

from .refine import AnnotationEvent, RefineSession, render_patch_mask


class SessionService:
    """Wraps one RefineSession with the queueing/locking the API needs."""

    def __init__(self, session: RefineSession):
        self.session = session
        self.pending: list[AnnotationEvent] = []
        self.queue_lock = threading.Lock()
        self.round_lock = threading.Lock()
        self._thumbnails = self._render_thumbnails()

    def _render_thumbnails(self) -> list[str]:
        grid = self.session.grid
        h, w = self.session.slide.shape[:2]
        thumbs = []
        for pid in range(grid.n_patches):
            y0, x0, y1, x1 = grid.patch_bounds(pid, h, w)
            img = Image.fromarray(self.session.slide[y0:y1, x0:x1]).resize((64, 64))
            buf = io.BytesIO()
            img.save(buf, format="PNG")
            thumbs.append(base64.b64encode(buf.getvalue()).decode("ascii"))
        return thumbs

    def session_payload(self) -> dict:
        s = self.session
        h, w = s.slide.shape[:2]
        return {
            "width": w,
            "height": h,
            "patch_size": s.grid.patch_size,
            "window": s.window,
            "grid": {"rows": s.grid.rows, "cols": s.grid.cols},
            "classes": {str(k): v for k, v in s.class_names.items()},
            "round_index": s.state.round_index,
            "dice_log": s.state.dice_log,
            "annotated": len(s.state.annotated),
        }

    def patches_payload(self, round_param: int | None) -> tuple[int, dict]:
        s = self.session
        if round_param is not None and round_param != s.state.round_index:
            return 400, {"error": "validation",
                         "detail": f"round {round_param} is not current "
                                   f"({s.state.round_index})"}
        with self.queue_lock:
            queued = {ev.patch_id: ev.class_index for ev in self.pending}
        labels = dict(s.grid.human_label)
        labels.update(queued)  # read-your-writes for queued events
        patches = []
        for pid in range(s.grid.n_patches):
            patches.append({
                "id": pid,
                "row": pid // s.grid.cols,
                "col": pid % s.grid.cols,
                "pred_class": int(s.grid.pred_class[pid]),
                "entropy": float(s.grid.entropy[pid]),
                "human_label": labels.get(pid),
                "thumbnail": self._thumbnails[pid],
            })
        return 200, {"round": s.state.round_index, "patches": patches}

    def queue_annotations(self, body) -> tuple[int, dict]:
        if not isinstance(body, list):
            return 400, {"error": "validation", "detail": "expected a list of events"}
        events = []
        n_classes = self.session.grid.n_patches
        valid_classes = set(self.session.class_names) | {0}
        for rec in body:
            try:
                ev = AnnotationEvent(patch_id=int(rec["patch_id"]),
                                     class_index=int(rec["class_index"]),
                                     timestamp=float(rec.get("timestamp", 0.0)))
            except (KeyError, TypeError, ValueError):
                return 400, {"error": "validation", "detail": f"malformed event {rec!r}"}
            if not 0 <= ev.patch_id < n_classes:
                return 400, {"error": "validation", "detail": f"patch id {ev.patch_id} out of range"}
            if ev.class_index not in valid_classes:
                return 400, {"error": "validation", "detail": f"unknown class {ev.class_index}"}
            events.append(ev)
        with self.queue_lock:
            self.pending.extend(events)
            total = len(self.pending)
        return 200, {"accepted": len(events), "pending": total}

    def run_round(self) -> tuple[int, dict]:
        if not self.round_lock.acquire(blocking=False):
            return 409, {"error": "busy", "detail": "a round is already running"}
        try:
            with self.queue_lock:
                events = list(self.pending)
                self.pending.clear()
            before = self.session.state.round_index
            import warnings

            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                state = self.session.run_round(events=events) if events else self.session.state
            if not events or state.round_index == before:
                return 200, {"noop": True, "round_index": before,
                             "dice_log": state.dice_log}
            return 200, {"noop": False, "round_index": state.round_index,
                         "applied": len(events), "dice_log": state.dice_log}
        finally:
            self.round_lock.release()

    def mask_png(self, level: str) -> tuple[int, bytes | dict]:
        s = self.session
        if level == "pixel":
            mask = s.pixel_mask
        elif level == "patch":
            mask = render_patch_mask(s.grid, *s.slide.shape[:2], s.state.patch_classes)
        else:
            return 400, {"error": "validation", "detail": f"unknown level {level!r}"}
        buf = io.BytesIO()
        Image.fromarray(mask.astype(np.uint8), mode="L").save(buf, format="PNG")
        return 200, buf.getvalue()


def make_handler(service: SessionService):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, fmt, *args):  # quiet by default
            pass

        def _send_json(self, status: int, payload: dict) -> None:
            body = json.dumps(payload).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json; charset=utf-8")
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(body)

        def _send_png(self, body: bytes) -> None:
            self.send_response(200)
            self.send_header("Content-Type", "image/png")
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(body)

        def _query(self) -> dict:
            if "?" not in self.path:
                return {}
            out = {}
            for part in self.path.split("?", 1)[1].split("&"):
                if "=" in part:
                    k, v = part.split("=", 1)
                    out[k] = v
            return out

        def do_OPTIONS(self):
            self.send_response(204)
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")
            self.end_headers()

        def do_GET(self):
            path = self.path.split("?")[0]
            if path == "/api/session":
                self._send_json(200, service.session_payload())
            elif path == "/api/patches":
                q = self._query()
                round_param = int(q["round"]) if "round" in q else None
                status, payload = service.patches_payload(round_param)
                self._send_json(status, payload)
            elif path == "/api/mask":
                level = self._query().get("level", "pixel")
                status, payload = service.mask_png(level)
                if status == 200:
                    self._send_png(payload)
                else:
                    self._send_json(status, payload)
            else:
                self._send_json(404, {"error": "not_found", "detail": self.path})

        def do_POST(self):
            path = self.path.split("?")[0]
            length = int(self.headers.get("Content-Length", 0))
            raw = self.rfile.read(length) if length else b""
            if path == "/api/annotations":
                try:
                    body = json.loads(raw.decode("utf-8")) if raw else []
                except json.JSONDecodeError:
                    self._send_json(400, {"error": "validation", "detail": "invalid JSON"})
                    return
                status, payload = service.queue_annotations(body)
                self._send_json(status, payload)
            elif path == "/api/round":
                status, payload = service.run_round()
                self._send_json(status, payload)
            else:
                self._send_json(404, {"error": "not_found", "detail": self.path})

    return Handler


def serve(session: RefineSession, port: int, host: str = "127.0.0.1"
          ) -> ThreadingHTTPServer:
    """Build the HTTP server (caller decides whether to block on serve_forever)."""
    service = SessionService(session)
    server = ThreadingHTTPServer((host, port), make_handler(service))
    server.service = service
    return server
