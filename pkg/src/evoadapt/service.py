"""HTTP service speaking the evaluation wire protocol, native backend only.

One process serves one request at a time; parallelism comes from running a
pool of these processes (see :mod:`evoadapt.fabric`).  Arbitrary candidate
code is out of scope here: code must carry a ``#native:`` directive, which
routes to the reference implementations.  The out-of-tree sandbox worker
implements the same protocol for arbitrary code.

Wire format (JSON bodies, HTTP 200 for both payloads and candidate-level
errors):
  POST /register_dataset {path}                          -> {dataset_id}
  POST /feat_select {dataset_id, shots, seed, code, w0, w1, topk}
                                                         -> {indices: [...]}
  POST /logit_comput {dataset_id, shots, seed, split, code, indices?,
                      alpha0, alpha1, alpha2, w0?, w1?, topk?}
                                                         -> {handle}
  POST /eval {handle}                                    -> {accuracy}
  GET  /health                                           -> {status}
Errors: {error: {kind, message}}.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import threading
import time
import uuid
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np

from . import native
from .adaptation import HyperParams, top1_accuracy
from .errors import CandidateError, ExecutionError, StoreError, UnknownDataset, UnknownHandle
from .store import FeatureDataset, load_dataset, probe_dataset, sample_few_shot

HANDLE_TTL_S = 600.0
PROBE_DATASET_ID = "__probe__"


class WorkerApp:
    """Protocol logic, independent of the HTTP plumbing."""

    def __init__(self, data_root: str | None = None, max_seconds: float = 60.0):
        self.data_root = data_root
        self.max_seconds = max_seconds
        self.datasets: dict[str, FeatureDataset] = {PROBE_DATASET_ID: probe_dataset()}
        self.handles: dict[str, tuple[np.ndarray, np.ndarray, float]] = {}
        self._lock = threading.Lock()

    # --- helpers ---

    def _dataset(self, dataset_id: str) -> FeatureDataset:
        ds = self.datasets.get(dataset_id)
        if ds is None:
            raise UnknownDataset(f"dataset {dataset_id!r} not registered")
        return ds

    def _task(self, dataset_id: str, shots: int, seed: int):
        return sample_few_shot(self._dataset(dataset_id), int(shots), int(seed))

    def _expire_handles(self) -> None:
        now = time.monotonic()
        with self._lock:
            dead = [h for h, (_, _, born) in self.handles.items()
                    if now - born > HANDLE_TTL_S]
            for h in dead:
                del self.handles[h]

    # --- endpoints ---

    def register_dataset(self, req: dict) -> dict:
        path = req["path"]
        try:
            ds = load_dataset(path)
        except (OSError, StoreError) as exc:
            raise CandidateError(f"cannot load dataset: {exc}") from None
        with open(path, "rb") as f:
            dataset_id = hashlib.sha256(f.read()).hexdigest()[:16]
        with self._lock:
            self.datasets[dataset_id] = ds
        return {"dataset_id": dataset_id}

    def feat_select(self, req: dict) -> dict:
        task = self._task(req["dataset_id"], req["shots"], req["seed"])
        hp = HyperParams(w0=float(req["w0"]), w1=float(req["w1"]), topk=int(req["topk"]))
        indices = self.execute_feat_select(req["code"], task, hp)
        return {"indices": [int(i) for i in indices]}

    def logit_comput(self, req: dict) -> dict:
        self._expire_handles()
        task = self._task(req["dataset_id"], req["shots"], req["seed"])
        split = req.get("split", "test")
        hp = HyperParams(
            w0=float(req.get("w0", 0.5)),
            w1=float(req.get("w1", 0.5)),
            topk=int(req["topk"]) if req.get("topk") is not None
            else max(1, int(0.7 * task.d)),
            alpha0=float(req["alpha0"]),
            alpha1=float(req["alpha1"]),
            alpha2=float(req["alpha2"]),
        )
        indices = req.get("indices")
        if indices is not None:
            indices = np.asarray(indices, dtype=np.int64)
        logits = self.execute_logits(req["code"], task, indices, hp, split)
        handle = uuid.uuid4().hex
        _, labels = task.split(split)
        with self._lock:
            self.handles[handle] = (np.asarray(logits), labels, time.monotonic())
        return {"handle": handle}

    def eval(self, req: dict) -> dict:
        self._expire_handles()
        with self._lock:
            entry = self.handles.get(req["handle"])
        if entry is None:
            raise UnknownHandle(f"handle {req['handle']!r} unknown or expired")
        logits, labels, _ = entry
        return {"accuracy": top1_accuracy(logits, labels)}

    def health(self) -> dict:
        return {"status": "ok", "backend": self.backend_name(),
                "datasets": len(self.datasets)}

    # --- execution backend (native directives); the sandbox worker overrides ---

    def backend_name(self) -> str:
        return "native"

    def execute_feat_select(self, code: str, task, hp: HyperParams) -> np.ndarray:
        return native.run_feat_select(code, task, hp)

    def execute_logits(self, code: str, task, indices, hp: HyperParams,
                       split: str) -> np.ndarray:
        return native.run_logits(code, task, indices, hp, split)


ROUTES = {
    "/register_dataset": "register_dataset",
    "/feat_select": "feat_select",
    "/logit_comput": "logit_comput",
    "/eval": "eval",
}


def make_handler(app: WorkerApp):
    class Handler(BaseHTTPRequestHandler):
        # HTTP/1.0: one connection per request, so a single-threaded worker is
        # never blocked by an idle keep-alive connection from another client.
        protocol_version = "HTTP/1.0"

        def _send(self, payload: dict, status: int = 200) -> None:
            body = json.dumps(payload).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_GET(self):
            if self.path == "/health":
                self._send(app.health())
            else:
                self._send({"error": {"kind": "CandidateError",
                                      "message": f"no route {self.path}"}}, 404)

        def do_POST(self):
            method = ROUTES.get(self.path)
            if method is None:
                self._send({"error": {"kind": "CandidateError",
                                      "message": f"no route {self.path}"}}, 404)
                return
            try:
                length = int(self.headers.get("Content-Length", "0"))
                req = json.loads(self.rfile.read(length) or b"{}")
            except (ValueError, UnicodeDecodeError) as exc:
                self._send({"error": {"kind": "CandidateError",
                                      "message": f"bad request body: {exc}"}}, 400)
                return
            try:
                self._send(getattr(app, method)(req))
            except ExecutionError as exc:
                self._send({"error": {"kind": exc.kind, "message": str(exc)}})
            except KeyError as exc:
                self._send({"error": {"kind": "CandidateError",
                                      "message": f"missing field {exc}"}})
            except Exception as exc:  # never let a request kill the worker
                self._send({"error": {"kind": "CandidateError",
                                      "message": f"{type(exc).__name__}: {exc}"}})

        def log_message(self, *args):
            pass

    return Handler


def serve(port: int, data_root: str | None = None, max_seconds: float = 60.0,
          app: WorkerApp | None = None) -> None:
    app = app or WorkerApp(data_root=data_root, max_seconds=max_seconds)
    server = HTTPServer(("127.0.0.1", port), make_handler(app))
    server.serve_forever()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="native evaluation service")
    parser.add_argument("--port", type=int, required=True)
    parser.add_argument("--data-root", default=None)
    parser.add_argument("--max-seconds", type=float, default=60.0)
    args = parser.parse_args(argv)
    serve(args.port, args.data_root, args.max_seconds)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
