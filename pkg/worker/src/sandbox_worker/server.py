"""HTTP worker speaking the evaluation wire protocol for arbitrary candidate code.

Single-threaded by design: one request at a time per process, HTTP/1.0 so no
idle keep-alive connection can block the next client.  Parallelism and
deadline enforcement belong to the supervising pool, which kills and
respawns a worker that stops answering probes.

Routes and JSON shapes mirror the orchestrator's contract:
  POST /register_dataset {path} -> {dataset_id}
  POST /feat_select {dataset_id, shots, seed, code, w0, w1, topk} -> {indices}
  POST /logit_comput {dataset_id, shots, seed, split, code, indices?,
                      alpha0, alpha1, alpha2, w0?, w1?, topk?} -> {handle}
  POST /eval {handle} -> {accuracy}
  GET  /health -> {status: ok|error}   (runs the built-in selftest)
Candidate-level failures come back as {error: {kind, message}} with HTTP 200.
"""

from __future__ import annotations

import json
import time
import uuid
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np

from . import runtime
from .store import ContainerError, Dataset, dataset_id_for, load_container, probe_dataset, sample_task

HANDLE_TTL_S = 600.0
PROBE_DATASET_ID = "__probe__"

SELFTEST_FS = """\
def feat_selection(clip_weights, train_feats, w0, w1, topk):
    variance = train_feats.var(dim=0, unbiased=False)
    order = torch.argsort(-variance, stable=True)[:topk]
    return torch.sort(order).values
"""

SELFTEST_LOGITS = """\
def compute_logits(train_feats, train_labels, test_feats, clip_weights,
                   indices, alpha0, alpha1, alpha2):
    return 100.0 * test_feats @ clip_weights
"""


class UnknownDataset(runtime.ExecError):
    kind = "UnknownDataset"


class UnknownHandle(runtime.ExecError):
    kind = "UnknownHandle"


class WorkerState:
    def __init__(self, data_root: str | None = None, max_seconds: float = 60.0,
                 half: bool = False):
        self.data_root = data_root
        self.max_seconds = max_seconds
        self.half = half
        self.datasets: dict[str, Dataset] = {PROBE_DATASET_ID: probe_dataset()}
        self.handles: dict[str, tuple[np.ndarray, np.ndarray, float]] = {}

    def _dataset(self, dataset_id: str) -> Dataset:
        ds = self.datasets.get(dataset_id)
        if ds is None:
            raise UnknownDataset(f"dataset {dataset_id!r} not registered")
        return ds

    def _task(self, req: dict):
        return sample_task(self._dataset(req["dataset_id"]),
                           int(req["shots"]), int(req["seed"]))

    def _expire(self) -> None:
        now = time.monotonic()
        for handle in [h for h, (_, _, born) in self.handles.items()
                       if now - born > HANDLE_TTL_S]:
            del self.handles[handle]

    # --- endpoints ---

    def register_dataset(self, req: dict) -> dict:
        path = req["path"]
        try:
            ds = load_container(path)
        except (OSError, ContainerError, ValueError, KeyError) as exc:
            raise runtime.CandidateError(f"cannot load dataset: {exc}") from None
        self.datasets[dataset_id_for(path)] = ds
        return {"dataset_id": dataset_id_for(path)}

    def feat_select(self, req: dict) -> dict:
        task = self._task(req)
        indices = runtime.exec_feat_select(
            req["code"], task, float(req["w0"]), float(req["w1"]),
            int(req["topk"]), half=self.half,
        )
        return {"indices": [int(i) for i in indices]}

    def logit_comput(self, req: dict) -> dict:
        self._expire()
        task = self._task(req)
        split = req.get("split", "test")
        logits = runtime.exec_logits(
            req["code"], task, req.get("indices"),
            float(req["alpha0"]), float(req["alpha1"]), float(req["alpha2"]),
            split=split,
            w0=float(req.get("w0", 0.5)), w1=float(req.get("w1", 0.5)),
            topk=int(req["topk"]) if req.get("topk") is not None else None,
            half=self.half,
        )
        handle = uuid.uuid4().hex
        _, labels = task.split(split)
        self.handles[handle] = (logits, labels, time.monotonic())
        return {"handle": handle}

    def eval(self, req: dict) -> dict:
        self._expire()
        entry = self.handles.get(req["handle"])
        if entry is None:
            raise UnknownHandle(f"handle {req['handle']!r} unknown or expired")
        logits, labels, _ = entry
        return {"accuracy": runtime.top1_accuracy(logits, labels)}

    def selftest(self) -> dict:
        """Canonical selection+logits+eval pipeline on the probe dataset."""
        try:
            task = sample_task(self.datasets[PROBE_DATASET_ID], 2, 0)
            indices = runtime.exec_feat_select(SELFTEST_FS, task, 0.5, 0.5, 2,
                                               half=self.half)
            logits = runtime.exec_logits(SELFTEST_LOGITS, task, indices,
                                         1.0, 1.0, 1.0, half=self.half)
            accuracy = runtime.top1_accuracy(logits, task.test_labels)
        except (KeyError, runtime.ExecError) as exc:
            return {"status": "error", "message": f"selftest failed: {exc}"}
        if accuracy != 1.0:
            return {"status": "error",
                    "message": f"selftest accuracy {accuracy} != 1.0"}
        return {"status": "ok", "backend": "sandbox", "half": self.half,
                "datasets": len(self.datasets)}


ROUTES = {
    "/register_dataset": "register_dataset",
    "/feat_select": "feat_select",
    "/logit_comput": "logit_comput",
    "/eval": "eval",
}


def make_handler(state: WorkerState):
    class Handler(BaseHTTPRequestHandler):
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
                self._send(state.selftest())
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
                self._send(getattr(state, method)(req))
            except runtime.ExecError as exc:
                self._send({"error": {"kind": exc.kind, "message": str(exc)}})
            except ContainerError as exc:
                self._send({"error": {"kind": "CandidateError", "message": str(exc)}})
            except KeyError as exc:
                self._send({"error": {"kind": "CandidateError",
                                      "message": f"missing field {exc}"}})
            except Exception as exc:  # a request must never kill the worker
                self._send({"error": {"kind": "CandidateError",
                                      "message": f"{type(exc).__name__}: {exc}"}})

        def log_message(self, *args):
            pass

    return Handler


def serve(port: int, data_root: str | None = None, max_seconds: float = 60.0,
          half: bool = False) -> None:
    state = WorkerState(data_root=data_root, max_seconds=max_seconds, half=half)
    HTTPServer(("127.0.0.1", port), make_handler(state)).serve_forever()
