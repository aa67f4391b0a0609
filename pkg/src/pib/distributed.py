"""Decentralized parallel training over TCP.

One initialization pass through randomly initialized units freezes every
unit's input features. Each unit's owner (a worker) then trains on its own,
with no further requests, and the coordinator assembles the result.
"""

from __future__ import annotations

import json
import socket
import threading
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import wire
from .data import DatasetBundle
from .engine import (
    LAYER_TYPES,
    InfoPlaneTrace,
    NetworkSpec,
    TrainConfig,
    TrainedNetwork,
    adapt_input,
    build_stages,
    evaluate,
    feature_stats,
    fit_readout,
    make_stage,
    train_unit_local,
    unit_seed,
    _check_dataset,
)
from .errors import (
    ConfigError,
    NetworkError,
    ProtocolError,
    ProtocolViolation,
    Timeout,
    WorkerError,
    WorkerUnreachable,
)
from .wire import Message, MsgType

TO_WORKER, FROM_WORKER = "coordinator->worker", "worker->coordinator"


@dataclass
class DistributedConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    progress_every: int = 50
    timeout: float = 600.0

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)
        if self.progress_every < 1:
            raise ValueError("progress_every must be >= 1")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, sep, port = str(endpoint).rpartition(":")
    if not sep or not host or not port.isdigit() or int(port) > 65535:
        raise ConfigError(f"endpoint {endpoint!r} is not host:port")
    return host, int(port)


# -- session log ----------------------------------------------------------------


class SessionLog:
    """Append-only record of every frame crossing every connection.

    Each record carries a per-connection sequence number (a logical clock)
    and the wall-clock offset from the log's creation.
    """

    def __init__(self):
        self._records: list[dict] = []
        self._seq: dict[int, int] = {}
        self._lock = threading.Lock()
        self._t0 = time.monotonic()

    def append(self, conn: int, direction: str, msg: Message) -> None:
        with self._lock:
            seq = self._seq.get(conn, 0)
            self._seq[conn] = seq + 1
            self._records.append({"conn": conn, "seq": seq, "direction": direction,
                                  "type": msg.type.name, "payload_len": len(msg.payload),
                                  "t": time.monotonic() - self._t0})

    @property
    def records(self) -> tuple:
        with self._lock:
            return tuple(dict(r) for r in self._records)

    def for_connection(self, conn: int) -> list[dict]:
        return sorted((r for r in self.records if r["conn"] == conn), key=lambda r: r["seq"])

    def connections(self) -> list[int]:
        return sorted({r["conn"] for r in self.records})

    def frames_during_training(self, conn: int) -> int:
        """Coordinator-to-worker frames after the last DATA and before the first RESULT."""
        recs = self.for_connection(conn)
        last_data = max((r["seq"] for r in recs if r["type"] == "DATA" and r["direction"] == TO_WORKER),
                        default=None)
        first_result = min((r["seq"] for r in recs if r["type"] == "RESULT"), default=None)
        if last_data is None or first_result is None:
            return 0
        return sum(1 for r in recs if r["direction"] == TO_WORKER and last_data < r["seq"] < first_result)

    def to_jsonl(self, timestamps: bool = False) -> str:
        """JSON lines ordered by connection then sequence.

        Wall-clock offsets are omitted by default so repeated runs export
        identical bytes; the sequence number is the logical timestamp.
        """
        recs = sorted(self.records, key=lambda r: (r["conn"], r["seq"]))
        lines = []
        for r in recs:
            if not timestamps:
                r.pop("t")
            lines.append(json.dumps(r, sort_keys=True))
        return "".join(line + "\n" for line in lines)


# -- initialization pass --------------------------------------------------------


def initialization_pass(spec: NetworkSpec, X: np.ndarray, cfg: TrainConfig) -> tuple[TrainedNetwork, list]:
    """Forward ``X`` once through randomly initialized units.

    Returns the network (stages holding their initial parameters and fitted
    adapters) and each unit's frozen local training inputs.
    """
    net = TrainedNetwork(spec, build_stages(spec, cfg.seed))
    h, frozen = X, []
    for l, stage in enumerate(net.stages):
        stage.in_stats = None if l == 0 else feature_stats(h)
        x_in = adapt_input(stage, h)
        frozen.append(stage.local_inputs(x_in, fit=True))
        stage.set_params(stage.init_params(np.random.default_rng([cfg.seed, l, 2])))
        h = stage.measure(x_in)
    return net, frozen


def assignment(spec: NetworkSpec, index: int, cfg: DistributedConfig) -> dict:
    layer = spec.to_dict()["layers"][index]
    t = cfg.train
    return {"unit_index": index, "layer": layer, "train_config": t.to_dict(),
            "seeds": {"train": t.seed, "unit": unit_seed(t.seed, index)},
            "kernel": t.kernel.to_dict(), "alpha": t.alpha, "beta": t.beta,
            "progress_every": cfg.progress_every}


def sequential_oracle(spec: NetworkSpec, X, y, cfg: TrainConfig) -> list[dict]:
    """In-process reference: train every unit on exactly the bytes a worker receives."""
    X, y = _check_dataset(spec, X, y)
    net, frozen = initialization_pass(spec, X, cfg)
    Xs = wire.as_sent(X)
    ys = np.asarray(y).astype("<u4").astype(np.int64)
    return [train_unit_local(wire.as_sent(H), Xs, ys, stage, cfg, unit_index=l)[0]
            for l, (stage, H) in enumerate(zip(net.stages, frozen))]


# -- worker ---------------------------------------------------------------------


def _error_frame(exc: Exception) -> Message:
    return Message(MsgType.ERROR, wire.json_payload({"error": type(exc).__name__, "message": str(exc)}))


class Worker:
    """Single-session trainer owning one unit. Binds on construction."""

    def __init__(self, endpoint: str = "127.0.0.1:0", timeout: float | None = 600.0):
        host, port = parse_endpoint(endpoint)
        self.timeout = timeout
        self.server = socket.create_server((host, port))
        self.address = self.server.getsockname()[:2]

    @property
    def endpoint(self) -> str:
        return f"{self.address[0]}:{self.address[1]}"

    def close(self) -> None:
        self.server.close()

    def serve(self) -> None:
        """Serve one coordinator until BYE, then return."""
        try:
            conn, _ = self.server.accept()
        finally:
            self.server.close()
        with conn:
            conn.settimeout(self.timeout)
            try:
                self._session(conn)
            except ProtocolError as exc:
                if not isinstance(exc, ProtocolViolation):
                    exc = ProtocolViolation(str(exc))
                self._try_send(conn, _error_frame(exc))
                raise exc
            except (NetworkError, OSError):
                raise
            except Exception as exc:
                self._try_send(conn, _error_frame(exc))
                raise

    @staticmethod
    def _try_send(conn, msg: Message) -> None:
        try:
            wire.write_message(conn, msg)
        except OSError:
            pass

    def _session(self, conn) -> None:
        assign = None
        greeted = False
        while True:
            try:
                msg = wire.read_message(conn)
            except socket.timeout:
                raise Timeout("coordinator went silent") from None
            if msg.type == MsgType.HELLO:
                wire.parse_hello(msg.payload)
                wire.write_message(conn, Message(MsgType.HELLO, wire.hello_payload()))
                greeted = True
            elif not greeted:
                raise ProtocolViolation(f"{msg.type.name} before HELLO")
            elif msg.type == MsgType.ASSIGN:
                if assign is not None:
                    raise ProtocolViolation("second ASSIGN in one session")
                assign = wire.parse_json(msg.payload)
            elif msg.type == MsgType.DATA:
                if assign is None:
                    raise ProtocolViolation("DATA before ASSIGN")
                H, X, y = wire.parse_data(msg.payload)
                wire.write_message(conn, self._train(assign, H, X, y, conn))
            elif msg.type == MsgType.BYE:
                return
            else:
                raise ProtocolViolation(f"unexpected {msg.type.name} from coordinator")

    @staticmethod
    def _train(assign: dict, H, X, y, conn) -> Message:
        try:
            index = int(assign["unit_index"])
            entry = dict(assign["layer"])
            layer = LAYER_TYPES[entry.pop("type")](**entry)
            cfg = TrainConfig.from_dict(assign["train_config"])
            every = int(assign["progress_every"])
            seed = int(assign["seeds"]["unit"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolViolation(f"malformed ASSIGN: {exc}") from None
        if every < 1 or H.shape[1] != _local_width(layer):
            raise ProtocolViolation("ASSIGN and DATA disagree")
        stage = make_stage(layer, seed)

        def progress(it, loss, i_xz, i_yz):
            if (it + 1) % every == 0:
                wire.write_message(conn, Message(MsgType.PROGRESS, wire.progress_payload(it + 1, loss, i_xz, i_yz)))

        params, trace = train_unit_local(H, X, y, stage, cfg, unit_index=index, progress=progress)
        curve = trace.for_unit(index)[:, 1:]
        tensors = {f"param.{k}": v for k, v in params.items()}
        tensors["trace"] = curve
        return Message(MsgType.RESULT, wire.tensors_payload({"unit_index": index}, tensors))


def _local_width(layer) -> int:
    return layer.rows if layer.kind == "memristor" else layer.n_out


def worker_run(listen_endpoint: str, timeout: float | None = 600.0) -> None:
    Worker(listen_endpoint, timeout).serve()


# -- coordinator ----------------------------------------------------------------


@dataclass
class UnitResult:
    index: int
    params: dict
    trace: np.ndarray
    progress: list = field(default_factory=list)


@dataclass
class DistributedRun:
    network: TrainedNetwork
    log: SessionLog
    results: list
    train_accuracy: float
    test_accuracy: float | None = None


class _Session:
    def __init__(self, conn_id, endpoint, assign, data, cfg, log, abort):
        self.conn_id, self.endpoint = conn_id, endpoint
        self.assign, self.data = assign, data
        self.cfg, self.log, self.abort = cfg, log, abort
        self.result: UnitResult | None = None
        self.error: Exception | None = None
        self.sock = None

    def send(self, msg: Message) -> None:
        wire.write_message(self.sock, msg)
        self.log.append(self.conn_id, TO_WORKER, msg)

    def recv(self) -> Message:
        try:
            msg = wire.read_message(self.sock)
        except socket.timeout:
            raise Timeout(f"worker {self.endpoint} silent for {self.cfg.timeout} s") from None
        self.log.append(self.conn_id, FROM_WORKER, msg)
        return msg

    def run(self) -> None:
        try:
            self._run()
        except Exception as exc:
            if not self.abort.is_set():
                self.error = exc
                self.abort.set()
        finally:
            if self.sock is not None:
                self.sock.close()

    def _run(self) -> None:
        host, port = parse_endpoint(self.endpoint)
        try:
            self.sock = socket.create_connection((host, port), timeout=self.cfg.timeout)
        except OSError as exc:
            raise WorkerUnreachable(f"cannot reach worker {self.endpoint}: {exc}") from None
        self.sock.settimeout(self.cfg.timeout)
        self.send(Message(MsgType.HELLO))
        ack = self._expect(MsgType.HELLO)
        if wire.parse_hello(ack.payload) != wire.PROTOCOL_VERSION:
            raise ProtocolViolation(f"worker {self.endpoint} speaks another protocol version")
        self.send(Message(MsgType.ASSIGN, wire.json_payload(self.assign)))
        self.send(Message(MsgType.DATA, self.data))
        progress = []
        while True:
            msg = self._expect(MsgType.PROGRESS, MsgType.RESULT)
            if msg.type == MsgType.PROGRESS:
                step = wire.parse_progress(msg.payload)
                if progress and step[0] <= progress[-1][0]:
                    raise ProtocolViolation("PROGRESS iterations must increase")
                progress.append(step)
                continue
            meta, tensors = wire.parse_tensors(msg.payload)
            if meta.get("unit_index") != self.assign["unit_index"]:
                raise ProtocolViolation("RESULT for the wrong unit")
            params = {k[len("param."):]: v for k, v in tensors.items() if k.startswith("param.")}
            self.result = UnitResult(self.assign["unit_index"], params, tensors.get("trace", np.zeros((0, 3))),
                                     progress)
            self.send(Message(MsgType.BYE))
            return

    def _expect(self, *kinds) -> Message:
        msg = self.recv()
        if msg.type == MsgType.ERROR:
            raise WorkerError(f"worker {self.endpoint} reported: {_describe(msg.payload)}", msg.payload)
        if msg.type not in kinds:
            raise ProtocolViolation(f"expected {'/'.join(k.name for k in kinds)}, got {msg.type.name}")
        return msg


def _describe(payload: bytes) -> str:
    try:
        d = wire.parse_json(payload)
        return f"{d.get('error')}: {d.get('message')}"
    except ProtocolError:
        return payload[:200].decode("utf-8", "replace")


def coordinator_run(spec: NetworkSpec, dataset, worker_endpoints: list, cfg: DistributedConfig,
                    log=None) -> DistributedRun:
    """Initialize, farm units out to workers, collect and assemble.

    ``dataset`` is a DatasetBundle or an ``(X, y)`` pair. Failures abort the
    run; the raised error carries the session log as ``exc.session_log``.
    """
    if isinstance(dataset, DatasetBundle):
        X, y, X_test, y_test = dataset.X_train, dataset.y_train, dataset.X_test, dataset.y_test
    else:
        (X, y), X_test, y_test = dataset, None, None
    X, y = _check_dataset(spec, X, y)
    if len(worker_endpoints) != len(spec.layers):
        raise ConfigError(f"{len(spec.layers)} hidden units need as many workers, got {len(worker_endpoints)}")
    tcfg = cfg.train
    net, frozen = initialization_pass(spec, X, tcfg)
    session_log = SessionLog()
    abort = threading.Event()
    sessions = [_Session(l, ep, assignment(spec, l, cfg), wire.data_payload(H, X, y), cfg, session_log, abort)
                for l, (ep, H) in enumerate(zip(worker_endpoints, frozen))]
    threads = [threading.Thread(target=s.run, name=f"session-{s.conn_id}", daemon=True) for s in sessions]
    for t in threads:
        t.start()
    abort_watch(sessions, abort)
    for t in threads:
        t.join()
    failed = next((s.error for s in sessions if s.error is not None), None)
    if failed is not None:
        failed.session_log = session_log
        raise failed
    results = [s.result for s in sessions]
    for r in results:
        net.trace.extend(_trace_from(r))
        if log:
            log(f"unit {r.index}: received {len(r.progress)} progress reports")
    h = _assemble(net, X, [r.params for r in results])
    fit_readout(net, h, y, tcfg)
    train_acc = evaluate(net, X, y)
    test_acc = evaluate(net, X_test, y_test) if X_test is not None else None
    return DistributedRun(net, session_log, results, train_acc, test_acc)


def abort_watch(sessions, abort: threading.Event) -> None:
    """Once any session fails, close every other socket so its thread exits."""
    while any(s.result is None and s.error is None for s in sessions):
        if abort.wait(0.05):
            for s in sessions:
                if s.sock is not None:
                    try:
                        s.sock.shutdown(socket.SHUT_RDWR)
                    except OSError:
                        pass
            return


def _trace_from(r: UnitResult) -> InfoPlaneTrace:
    trace = InfoPlaneTrace()
    for it, (i_xz, i_yz, loss) in enumerate(np.asarray(r.trace).reshape(-1, 3)):
        trace.append(r.index, it, i_xz, i_yz, loss)
    return trace


def _assemble(net: TrainedNetwork, X: np.ndarray, params: list) -> np.ndarray:
    """Deploy trained parameters, re-fitting adapters on the assembled network's own measurements."""
    h = X
    for l, (stage, p) in enumerate(zip(net.stages, params)):
        stage.in_stats = None if l == 0 else feature_stats(h)
        x_in = adapt_input(stage, h)
        stage.local_inputs(x_in, fit=True)
        stage.set_params(p)
        h = stage.measure(x_in)
    return h


def config_dict(cfg: DistributedConfig) -> dict:
    d = asdict(cfg)
    d["train"] = cfg.train.to_dict()
    return d
