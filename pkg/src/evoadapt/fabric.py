"""Candidate evaluation fabric: dispatch, caching, worker supervision.

Two backends sit behind one call surface.  ``native`` executes directive
code in-process through a :class:`~evoadapt.service.WorkerApp`; ``sandbox``
spawns one HTTP worker process per slot and speaks the wire protocol to
them.  Fitness orchestration is shared with the reference implementation
(:func:`evoadapt.adaptation.fitness_of`), so both routes compute the same
number from the same calls.

The monitor probes every sandbox worker with canonical requests against the
built-in micro-dataset and replaces any worker that fails or stalls, keeping
the pool at its configured size.
"""

from __future__ import annotations

import hashlib
import queue
import socket
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
import requests

from . import seeds
from .adaptation import HyperParams, default_theta0, fitness_of
from .errors import (
    ExecutionError,
    InfrastructureError,
    SpawnFailure,
    Timeout,
    UnknownHandle,
    WorkerCrash,
    error_from_wire,
)
from .native import validate_indices
from .service import PROBE_DATASET_ID, WorkerApp
from .store import FewShotTask, load_dataset, sample_few_shot


@dataclass(frozen=True)
class TaskRef:
    """Wire-level identity of a few-shot task."""

    dataset_id: str
    shots: int
    seed: int


@dataclass
class WorkerDescriptor:
    id: str
    kind: str                       # native | sandbox
    endpoint: Optional[str] = None
    process: Optional[subprocess.Popen] = None
    state: str = "healthy"          # healthy | suspect | dead
    generation: int = 0


@dataclass
class FabricConfig:
    backend: str = "native"
    workers: int = 4
    timeout_s: float = 60.0
    probe_interval_s: float = 30.0
    probe_deadline_s: float = 10.0
    spawn_timeout_s: float = 15.0
    worker_cmd: Optional[list[str]] = None
    data_root: Optional[str] = None

    def resolved_cmd(self, port: int) -> list[str]:
        template = self.worker_cmd or [
            "{python}", "-m", "sandbox_worker", "--port", "{port}",
            "--max-seconds", "{max_seconds}",
        ]
        subs = {
            "{python}": sys.executable,
            "{port}": str(port),
            "{data_root}": self.data_root or "",
            "{max_seconds}": str(self.timeout_s),
        }
        out = []
        for token in template:
            for key, value in subs.items():
                token = token.replace(key, value)
            out.append(token)
        return out


def _free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def code_digest(code: str) -> str:
    return hashlib.sha256(code.encode("utf-8")).hexdigest()


def _digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


_DETERMINISTIC_KINDS = ("CandidateError", "DefinitionMissing", "InvalidOutput")


class ExecutionFabric:
    def __init__(self, config: Optional[FabricConfig] = None):
        self.config = config or FabricConfig()
        if self.config.backend not in ("native", "sandbox"):
            raise ValueError(f"unknown backend {self.config.backend!r}")
        self.workers: dict[str, WorkerDescriptor] = {}
        self._registered_paths: list[str] = []
        self._datasets: dict[str, FewShotTask | object] = {}
        self._task_cache: dict[TaskRef, FewShotTask] = {}
        self._handle_owner: dict[str, str] = {}
        self._idle: "queue.Queue[str]" = queue.Queue()
        self._memo: dict[tuple, tuple] = {}
        self._lock = threading.Lock()
        self._app: Optional[WorkerApp] = None
        self._monitor: Optional[threading.Thread] = None
        self._monitor_stop = threading.Event()
        self.service_calls = 0
        self.cache_hits = 0
        self.calls_by_route: dict[str, int] = {}
        self._started = False

    # --- lifecycle -----------------------------------------------------------

    def start(self) -> "ExecutionFabric":
        if self._started:
            return self
        if self.config.backend == "native":
            self._app = WorkerApp(data_root=self.config.data_root,
                                  max_seconds=self.config.timeout_s)
            for i in range(self.config.workers):
                self.workers[f"w{i}"] = WorkerDescriptor(id=f"w{i}", kind="native")
        else:
            for i in range(self.config.workers):
                desc = WorkerDescriptor(id=f"w{i}", kind="sandbox")
                self._spawn(desc)
                self.workers[desc.id] = desc
                self._idle.put(desc.id)
        self._started = True
        return self

    def shutdown(self) -> None:
        self.stop_monitor()
        for desc in self.workers.values():
            self._kill(desc)
        self.workers.clear()
        self._started = False

    def __enter__(self) -> "ExecutionFabric":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.shutdown()

    # --- worker processes ------------------------------------------------------

    def _spawn(self, desc: WorkerDescriptor) -> None:
        port = _free_port()
        cmd = self.config.resolved_cmd(port)
        try:
            proc = subprocess.Popen(cmd, stdout=subprocess.DEVNULL,
                                    stderr=subprocess.DEVNULL)
        except OSError as exc:
            raise SpawnFailure(f"cannot start worker: {exc}") from None
        endpoint = f"http://127.0.0.1:{port}"
        deadline = time.monotonic() + self.config.spawn_timeout_s
        while time.monotonic() < deadline:
            if proc.poll() is not None:
                raise SpawnFailure(f"worker exited with {proc.returncode} during startup")
            try:
                resp = requests.get(endpoint + "/health", timeout=1.0)
                if resp.status_code == 200 and resp.json().get("status") == "ok":
                    break
            except requests.RequestException:
                pass
            time.sleep(0.05)
        else:
            proc.kill()
            raise SpawnFailure("worker did not become healthy before the spawn timeout")
        desc.endpoint = endpoint
        desc.process = proc
        desc.state = "healthy"
        desc.generation += 1
        # a fresh worker knows nothing: replay dataset registrations
        for path in self._registered_paths:
            self._post_http(desc, "/register_dataset", {"path": path},
                            timeout=self.config.spawn_timeout_s)

    def _kill(self, desc: WorkerDescriptor) -> None:
        if desc.process is None:
            return
        desc.state = "dead"
        proc = desc.process
        if proc.poll() is None:
            proc.terminate()
            try:
                proc.wait(timeout=2.0)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait(timeout=5.0)
        with self._lock:
            stale = [h for h, w in self._handle_owner.items() if w == desc.id]
            for h in stale:
                del self._handle_owner[h]

    # --- datasets ---------------------------------------------------------------

    def register_dataset(self, path) -> str:
        path = str(path)
        ds = load_dataset(path)
        with open(path, "rb") as f:
            dataset_id = hashlib.sha256(f.read()).hexdigest()[:16]
        with self._lock:
            self._datasets[dataset_id] = ds
            self._registered_paths.append(path)
        if self.config.backend == "native":
            reply = self._app.register_dataset({"path": path})
            assert reply["dataset_id"] == dataset_id
        else:
            for desc in self.workers.values():
                reply = self._post_http(desc, "/register_dataset", {"path": path})
                if reply.get("dataset_id") != dataset_id:
                    raise InfrastructureError(
                        f"worker {desc.id} returned dataset id {reply!r}"
                    )
        return dataset_id

    def task(self, ref: TaskRef) -> FewShotTask:
        with self._lock:
            cached = self._task_cache.get(ref)
        if cached is not None:
            return cached
        ds = self._datasets.get(ref.dataset_id)
        if ds is None:
            raise InfrastructureError(f"dataset {ref.dataset_id!r} not registered")
        task = sample_few_shot(ds, ref.shots, ref.seed)
        with self._lock:
            self._task_cache[ref] = task
        return task

    # --- request transport --------------------------------------------------------

    def _post_http(self, desc: WorkerDescriptor, route: str, payload: dict,
                   timeout: Optional[float] = None) -> dict:
        timeout = timeout or self.config.timeout_s
        try:
            resp = requests.post(desc.endpoint + route, json=payload, timeout=timeout)
        except requests.Timeout:
            desc.state = "suspect"
            raise Timeout(f"{route} on {desc.id} exceeded {timeout}s") from None
        except requests.RequestException as exc:
            desc.state = "suspect"
            raise WorkerCrash(f"{route} on {desc.id} failed: {exc}") from None
        if resp.status_code != 200:
            raise WorkerCrash(f"{route} on {desc.id}: HTTP {resp.status_code}")
        body = resp.json()
        if "error" in body:
            err = body["error"]
            raise error_from_wire(err.get("kind", "ExecutionError"),
                                  err.get("message", ""))
        return body

    def _call(self, route: str, payload: dict, worker: Optional[str] = None,
              timeout: Optional[float] = None) -> dict:
        with self._lock:
            self.service_calls += 1
            self.calls_by_route[route] = self.calls_by_route.get(route, 0) + 1
        if self.config.backend == "native":
            method = getattr(self._app, route.lstrip("/"))
            return method(payload)
        desc = self.workers[worker if worker is not None else self._any_worker()]
        return self._post_http(desc, route, payload, timeout=timeout)

    def _any_worker(self) -> str:
        for desc in self.workers.values():
            if desc.state == "healthy":
                return desc.id
        raise InfrastructureError("no healthy workers")

    # --- service calls ---------------------------------------------------------

    def call_feat_select(self, ref: TaskRef, code: str, hp: HyperParams,
                         worker: Optional[str] = None) -> np.ndarray:
        reply = self._call("/feat_select", {
            "dataset_id": ref.dataset_id, "shots": ref.shots, "seed": ref.seed,
            "code": code, "w0": hp.w0, "w1": hp.w1, "topk": hp.topk,
        }, worker=worker)
        task = self.task(ref)
        return validate_indices(reply["indices"], task.d, hp.topk)

    def call_logit_comput(self, ref: TaskRef, code: str, hp: HyperParams,
                          indices=None, split: str = "test",
                          worker: Optional[str] = None) -> str:
        payload = {
            "dataset_id": ref.dataset_id, "shots": ref.shots, "seed": ref.seed,
            "split": split, "code": code,
            "alpha0": hp.alpha0, "alpha1": hp.alpha1, "alpha2": hp.alpha2,
            "w0": hp.w0, "w1": hp.w1, "topk": hp.topk,
        }
        if indices is not None:
            payload["indices"] = [int(i) for i in np.asarray(indices).ravel()]
        reply = self._call("/logit_comput", payload, worker=worker)
        handle = reply["handle"]
        with self._lock:
            self._handle_owner[handle] = worker if worker is not None else "w0"
        return handle

    def call_eval(self, handle: str, worker: Optional[str] = None) -> float:
        if worker is None:
            with self._lock:
                worker = self._handle_owner.get(handle)
            if worker is None and self.config.backend == "sandbox":
                raise UnknownHandle(f"handle {handle!r} has no live owner")
        reply = self._call("/eval", {"handle": handle}, worker=worker)
        return float(reply["accuracy"])

    # --- candidate evaluation -----------------------------------------------------

    def evaluate_candidate(self, code: str, stage: str, task_refs: Sequence[TaskRef],
                           grid: Sequence[HyperParams],
                           fixed_fs_code: Optional[str] = None,
                           fixed_lg_code: Optional[str] = None) -> float:
        """Fitness of one candidate via the services, memoized by content.

        Deterministic candidate failures (bad code, bad output) are cached and
        replayed; infrastructure failures (timeouts, crashes) are not.
        """
        if stage == "feature_selection":
            fs_code: Optional[str] = code
            lg_code = fixed_lg_code or seeds.APE_LOGITS_CODE
        elif stage == "logits_computation":
            fs_code = fixed_fs_code
            lg_code = code
        elif stage == "joint":
            fs_code = None
            lg_code = code
        else:
            raise ValueError(f"unknown stage {stage!r}")

        key = (
            stage,
            code_digest(code),
            code_digest(fs_code or ""),
            code_digest(lg_code),
            _digest("|".join(f"{r.dataset_id}:{r.shots}:{r.seed}" for r in task_refs)),
            _digest("|".join(
                f"{hp.w0},{hp.w1},{hp.topk},{hp.alpha0},{hp.alpha1},{hp.alpha2}"
                for hp in grid
            )),
        )
        with self._lock:
            hit = self._memo.get(key)
            if hit is not None:
                self.cache_hits += 1
        if hit is not None:
            if hit[0] == "ok":
                return hit[1]
            raise error_from_wire(hit[1], hit[2])

        worker = self._checkout()
        try:
            fitness = self._run_fitness(fs_code, lg_code, task_refs, grid, worker)
        except ExecutionError as exc:
            if exc.kind in _DETERMINISTIC_KINDS:
                with self._lock:
                    self._memo[key] = ("err", exc.kind, str(exc))
            raise
        finally:
            self._release(worker)
        with self._lock:
            self._memo[key] = ("ok", fitness)
        return fitness

    def make_evaluator(self, task_refs: Sequence[TaskRef], grid: Sequence[HyperParams]):
        """Close over the holdout tasks and grid; matches the engine's contract."""

        def evaluate(code: str, stage: str, fixed_fs_code: Optional[str] = None) -> float:
            return self.evaluate_candidate(code, stage, task_refs, grid,
                                           fixed_fs_code=fixed_fs_code)

        return evaluate

    def _run_fitness(self, fs_code, lg_code, task_refs, grid, worker) -> float:
        tasks = [self.task(ref) for ref in task_refs]
        ref_of = {id(t): ref for t, ref in zip(tasks, task_refs)}

        fs = None
        if fs_code is not None:
            def fs(task, hp):
                return self.call_feat_select(ref_of[id(task)], fs_code, hp, worker=worker)

        def lg(task, channels, hp):
            # the search grid varies the alphas only; theta0 stays pinned to
            # the task's own dimension (joint candidates select with it)
            theta = replace(hp, w0=0.5, w1=0.5, topk=default_theta0(task.d).topk)
            handle = self.call_logit_comput(
                ref_of[id(task)], lg_code, theta, indices=channels, worker=worker
            )
            return self.call_eval(handle, worker=worker)

        return fitness_of(fs, lg, tasks, grid)

    def _checkout(self) -> Optional[str]:
        if self.config.backend == "native":
            return None
        try:
            return self._idle.get(timeout=self.config.timeout_s)
        except queue.Empty:
            raise InfrastructureError("worker pool exhausted") from None

    def _release(self, worker: Optional[str]) -> None:
        if worker is not None:
            self._idle.put(worker)

    # --- monitor ---------------------------------------------------------------

    def probe_and_heal(self) -> list[dict]:
        """Probe all sandbox workers with canonical requests; kill and respawn
        any that fail.  Returns one report entry per healed worker."""
        report: list[dict] = []
        if self.config.backend != "sandbox":
            return report
        for desc in list(self.workers.values()):
            failure = self._probe(desc)
            if failure is None:
                desc.state = "healthy"
                continue
            started = time.monotonic()
            self._kill(desc)
            entry = {"worker": desc.id, "reason": failure, "respawned": False,
                     "recovery_s": None}
            try:
                self._spawn(desc)
                entry["respawned"] = True
                entry["recovery_s"] = time.monotonic() - started
            except SpawnFailure as exc:
                entry["error"] = str(exc)
            report.append(entry)
        return report

    def _probe(self, desc: WorkerDescriptor) -> Optional[str]:
        if desc.process is not None and desc.process.poll() is not None:
            return f"process exited with {desc.process.returncode}"
        deadline = self.config.probe_deadline_s
        hp = HyperParams(w0=0.5, w1=0.5, topk=2, alpha0=1.0, alpha1=1.0, alpha2=1.0)
        try:
            reply = self._post_http(desc, "/feat_select", {
                "dataset_id": PROBE_DATASET_ID, "shots": 2, "seed": 0,
                "code": seeds.APE_FS_CODE, "w0": hp.w0, "w1": hp.w1, "topk": hp.topk,
            }, timeout=deadline)
            if len(reply["indices"]) != hp.topk:
                return "probe feat_select returned wrong arity"
            reply = self._post_http(desc, "/logit_comput", {
                "dataset_id": PROBE_DATASET_ID, "shots": 2, "seed": 0,
                "split": "test", "code": seeds.TIP_LOGITS_CODE,
                "alpha0": 1.0, "alpha1": 1.0, "alpha2": 1.0,
            }, timeout=deadline)
            acc = self._post_http(desc, "/eval", {"handle": reply["handle"]},
                                  timeout=deadline)["accuracy"]
            if acc != 1.0:
                return f"probe accuracy {acc} != 1.0"
        except ExecutionError as exc:
            return f"{exc.kind}: {exc}"
        return None

    def start_monitor(self) -> None:
        if self._monitor is not None or self.config.backend != "sandbox":
            return
        self._monitor_stop.clear()

        def loop():
            while not self._monitor_stop.wait(self.config.probe_interval_s):
                try:
                    self.probe_and_heal()
                except Exception:
                    pass  # monitor must outlive any single bad cycle

        self._monitor = threading.Thread(target=loop, daemon=True)
        self._monitor.start()

    def stop_monitor(self) -> None:
        if self._monitor is None:
            return
        self._monitor_stop.set()
        self._monitor.join(timeout=5.0)
        self._monitor = None

    # --- introspection -----------------------------------------------------------

    def live_worker_count(self) -> int:
        if self.config.backend == "native":
            return len(self.workers)
        return sum(
            1 for d in self.workers.values()
            if d.process is not None and d.process.poll() is None
        )
