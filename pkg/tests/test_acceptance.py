"""End-to-end acceptance checks.

Each test prints one PASS/FAIL line (collected again in the terminal summary)
and then asserts the same condition. The benchmark tests train real models
and take minutes each.
"""

import copy
import json
import socket
import struct
import threading
import time
from pathlib import Path

import numpy as np
import pytest

from pib import info, wire
from pib.baselines import BaselineConfig, bp_train_in_silico, deploy_and_measure_gap, dfa_train
from pib.cli import main
from pib.config import default_rl_network, default_rl_train
from pib.data import benchmark_dataset, make_ood_split
from pib.distributed import DistributedConfig, Worker, coordinator_run, sequential_oracle
from pib.engine import (
    MemristorLayer,
    NetworkSpec,
    OpticalLayer,
    TrainConfig,
    cascade_train,
    evaluate,
    generalization_suite,
    inject_adc_fault,
    retrain_downstream,
)
from pib.errors import ProtocolError
from pib.info import KernelSpec
from pib.optim import AdamConfig
from pib.rl import RlConfig, running_average, train_rl_agent
from pib.variants import AugmentSpec, linear_probe, probe_network, train_unsupervised
from pib.wire import Message, MsgType

SEEDS = (0, 1, 2)
MNIST_SPEC = NetworkSpec([MemristorLayer(784, 100)], (100, 10))
OPTICAL_SPEC = NetworkSpec([OpticalLayer(784, 512, 64)], (64, 10))
OPTICAL_TRAIN = dict(beta=0.1, iterations_per_unit=1600, optimizer=AdamConfig(lr=3e-4))
UNSUP_WIDTH = 128
UNSUP_AUGMENT = AugmentSpec(2, 0.1, 0.2)


def majority(flags) -> bool:
    flags = [bool(f) for f in flags]
    return sum(flags) * 2 > len(flags)


# -- 1. estimator ---------------------------------------------------------------


def _fd_loss(Z, Xg, Yg, beta, kernel):
    A = info.gram(Z, kernel)
    return -(info.mutual_information(A, Yg) - beta * info.mutual_information(A, Xg))


def test_estimator_properties(report_criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {"uniform": 0.0, "rank1": 0.0, "mi_min": np.inf, "sym": 0.0, "dominance": np.inf, "grad": 0.0}
    for n in range(2, 65):
        worst["uniform"] = max(worst["uniform"], abs(info.entropy(np.eye(n) / n) - np.log2(n)))
        v = rng.normal(size=n)
        worst["rank1"] = max(worst["rank1"], abs(info.entropy(np.outer(v, v) / (v @ v))))
    for k in range(1000):
        n = int(rng.integers(2, 33))
        A = info.gram(rng.normal(size=(n, int(rng.integers(1, 6)))) * rng.uniform(0.1, 5.0))
        # a quarter of the pairs are degenerate: identity, rank one, or A itself
        B = [np.eye(n) / n, np.full((n, n), 1.0 / n), A][k % 3] if k % 4 == 0 else \
            info.gram(rng.normal(size=(n, int(rng.integers(1, 6)))) * rng.uniform(0.1, 5.0))
        ab, ba = info.mutual_information(A, B), info.mutual_information(B, A)
        worst["mi_min"] = min(worst["mi_min"], ab, ba)
        worst["sym"] = max(worst["sym"], abs(ab - ba))
        joint = info.joint_entropy(A, B)
        worst["dominance"] = min(worst["dominance"], joint - max(info.entropy(A), info.entropy(B)))
    for seed in range(20):
        r = np.random.default_rng([7, seed])
        n, d = int(r.integers(4, 17)), int(r.integers(1, 5))
        Z = r.normal(size=(n, d))
        Xg = info.gram(r.normal(size=(n, 6)))
        Yg = info.gram(r.integers(0, 3, n), KernelSpec.label())
        kernel = KernelSpec.fixed(info.median_bandwidth(Z))
        _, grad = info.pib_loss_and_grad(Z, Xg, Yg, 0.2, kernel=kernel)
        num = np.zeros_like(Z)
        for idx in np.ndindex(Z.shape):
            Zp, Zm = Z.copy(), Z.copy()
            Zp[idx] += 1e-5
            Zm[idx] -= 1e-5
            num[idx] = (_fd_loss(Zp, Xg, Yg, 0.2, kernel) - _fd_loss(Zm, Xg, Yg, 0.2, kernel)) / 2e-5
        worst["grad"] = max(worst["grad"], np.max(np.abs(grad - num)) / max(np.max(np.abs(num)), 1e-12))
    elapsed = time.perf_counter() - t0
    ok = (worst["uniform"] <= 1e-9 and worst["rank1"] <= 1e-9 and worst["mi_min"] >= -1e-9
          and worst["sym"] <= 1e-12 and worst["dominance"] >= -1e-9 and worst["grad"] <= 1e-4 and elapsed < 30)
    detail = ", ".join(f"{k} {v:.2e}" for k, v in worst.items()) + f", {elapsed:.1f}s"
    assert report_criterion(1, "estimator properties", ok, detail)


# -- 2-4. memristor MNIST benchmark ------------------------------------------------


@pytest.fixture(scope="module")
def mnist():
    return benchmark_dataset("mnist", 8000, 2000, 0)


@pytest.fixture(scope="module")
def pib_mnist(mnist):
    t0 = time.perf_counter()
    net = cascade_train(MNIST_SPEC, mnist.X_train, mnist.y_train, TrainConfig(seed=0))
    return net, time.perf_counter() - t0


def test_supervised_accuracy(report_criterion, mnist, pib_mnist):
    net, elapsed = pib_mnist
    acc = evaluate(net, mnist.X_test, mnist.y_test)
    ok = acc >= 0.93 and elapsed < 15 * 60
    detail = f"test accuracy {acc:.4f} (target 0.93) on {len(mnist.y_train)}/{len(mnist.y_test)} images, {elapsed:.0f}s"
    assert report_criterion(2, "supervised memristor accuracy", ok, detail)


def test_reality_gap_ordering(report_criterion, mnist, pib_mnist):
    net, _ = pib_mnist
    pib_gap = evaluate(net, mnist.X_test, mnist.y_test, ideal=True) - evaluate(net, mnist.X_test, mnist.y_test)
    bc = BaselineConfig(seed=0)
    weights, sim = bp_train_in_silico(MNIST_SPEC, mnist.X_train, mnist.y_train, bc, mnist.X_test, mnist.y_test)
    _, bp_gap = deploy_and_measure_gap(weights, MNIST_SPEC, mnist.X_test, mnist.y_test, sim, bc.seed)
    ok = bp_gap - pib_gap >= 0.01
    detail = f"BP gap {100 * bp_gap:.2f} pts vs PIB gap {100 * pib_gap:.2f} pts"
    assert report_criterion(3, "simulation-reality gap ordering", ok, detail)


def test_fault_recovery(report_criterion, mnist, pib_mnist):
    t0 = time.perf_counter()
    net = copy.deepcopy(pib_mnist[0])
    cfg = TrainConfig(seed=0)
    before = evaluate(net, mnist.X_test, mnist.y_test)
    inject_adc_fault(net, 0, 0.25, "random", seed=0)
    faulted = evaluate(net, mnist.X_test, mnist.y_test)
    retrain_downstream(net, mnist.X_train, mnist.y_train, 0, cfg)
    recovered = evaluate(net, mnist.X_test, mnist.y_test)
    elapsed = time.perf_counter() - t0 + pib_mnist[1]
    ok = before - faulted >= 0.15 and before - recovered <= 0.05 and elapsed < 15 * 60
    detail = f"{before:.4f} -> faulted {faulted:.4f} -> recovered {recovered:.4f}, {elapsed:.0f}s"
    assert report_criterion(4, "ADC fault recovery", ok, detail)


# -- 5-6. optical benchmark -------------------------------------------------------


@pytest.fixture(scope="module")
def fashion():
    return benchmark_dataset("fashion", 8000, 2000, 0)


def test_fit_then_compress(report_criterion, fashion):
    rows = []
    for seed in SEEDS:
        cfg = TrainConfig(seed=seed, monitor_size=500, **OPTICAL_TRAIN)
        net = cascade_train(OPTICAL_SPEC, fashion.X_train, fashion.y_train, cfg)
        trace = net.trace.for_unit(0)
        i_xz, i_yz = trace[:, 1], trace[:, 2]
        early = max(1, len(i_yz) // 4)
        rise = i_yz[:early].max() - i_yz[0]
        drop = i_xz.max() - i_xz[-1]
        rows.append((rise >= 0.1 and drop >= 0.05, rise, drop))
    ok = majority(r[0] for r in rows)
    detail = "; ".join(f"seed {s}: I(Y;Z) +{r[1]:.3f}, I(X;Z) -{r[2]:.3f} bits" for s, r in zip(SEEDS, rows))
    assert report_criterion(5, "fit-then-compress", ok, detail)


def test_generalization_trends(report_criterion, fashion):
    data, X_ood = make_ood_split(fashion, [8])
    spec = NetworkSpec(OPTICAL_SPEC.layers, (OPTICAL_SPEC.final_readout[0], data.n_classes))
    levels, fractions = (0.0, 0.05), (0.05,)
    noise_wins, data_wins, aurocs, noisy = [], [], [], []
    for seed in SEEDS:
        cfg = TrainConfig(seed=seed, **OPTICAL_TRAIN)
        bc = BaselineConfig(seed=seed)

        def pib(X, y):
            return cascade_train(spec, X, y, cfg)

        def dfa(X, y):
            return dfa_train(spec, X, y, bc)

        res = {}
        for name, trainer in (("pib", pib), ("dfa", dfa)):
            net = trainer(data.X_train, data.y_train)
            res[name] = generalization_suite(net, data.X_test, data.y_test, X_ood, trainer, data.X_train,
                                             data.y_train, levels, fractions, seed)
        noisy.append((res["pib"]["noise_curve"][1], res["dfa"]["noise_curve"][1]))
        noise_wins.append(res["pib"]["noise_curve"][1] >= res["dfa"]["noise_curve"][1])
        data_wins.append(res["pib"]["low_data_curve"][0] >= res["dfa"]["low_data_curve"][0])
        aurocs.append(res["pib"]["ood_auroc"])
    ok = majority(noise_wins) and majority(data_wins) and majority(a >= 0.7 for a in aurocs)
    detail = (f"PIB >= DFA at 5% noise {sum(noise_wins)}/3 "
              f"({', '.join(f'{p:.3f} vs {d:.3f}' for p, d in noisy)}), at 5% data {sum(data_wins)}/3, "
              f"OOD AUROC {', '.join(f'{a:.3f}' for a in aurocs)}")
    assert report_criterion(6, "generalization trends", ok, detail)


# -- 7. unsupervised probe --------------------------------------------------------


def test_unsupervised_probe(report_criterion, mnist):
    spec = NetworkSpec([MemristorLayer(784, UNSUP_WIDTH)], (UNSUP_WIDTH, 10))
    raw = linear_probe(mnist.X_test, mnist.y_test, 0)
    accs = []
    for iters in (100, 400, 1600):
        cfg = TrainConfig(beta=0.0, iterations_per_unit=iters, kernel=KernelSpec(standardize=False), seed=0)
        net = train_unsupervised(spec, mnist.X_train, cfg, UNSUP_AUGMENT)
        accs.append(probe_network(net, mnist.X_test, mnist.y_test, 0))
    monotone = all(b >= a - 0.005 for a, b in zip(accs, accs[1:]))
    ok = monotone and accs[-1] - raw >= 0.03
    detail = f"probe {', '.join(f'{a:.3f}' for a in accs)} at 100/400/1600 iterations vs raw pixels {raw:.3f}"
    assert report_criterion(7, "unsupervised linear probe", ok, detail)


# -- 8. reinforcement learning -----------------------------------------------------


def test_rl_solved_regime(report_criterion):
    outcomes = []
    for seed in SEEDS:
        t0 = time.perf_counter()
        res = train_rl_agent(default_rl_network(), RlConfig(seed=seed), default_rl_train(seed))
        elapsed = time.perf_counter() - t0
        outcomes.append((res.solved_episode is not None and elapsed < 30 * 60, res.solved_episode, elapsed))
        if sum(o[0] for o in outcomes) >= 2 or sum(not o[0] for o in outcomes) >= 2:
            break  # the 2-of-3 majority is already decided
    control = train_rl_agent(default_rl_network(), RlConfig(seed=0, eps_start=1.0, eps_end=1.0,
                                                             stop_when_solved=False), default_rl_train(0))
    control_max = max(running_average(control.scores))
    ok = sum(o[0] for o in outcomes) >= 2 and control_max < 50
    detail = "; ".join(f"seed {s}: solved at {o[1]} in {o[2]:.0f}s" for s, o in zip(SEEDS, outcomes))
    detail += f"; random-policy max running average {control_max:.1f}"
    assert report_criterion(8, "CartPole solved regime", ok, detail)


# -- 9. distributed ---------------------------------------------------------------


def _serve_workers(n):
    workers = [Worker("127.0.0.1:0", timeout=60) for _ in range(n)]
    threads = [threading.Thread(target=w.serve, daemon=True) for w in workers]
    for t in threads:
        t.start()
    return [w.endpoint for w in workers], threads


def _random_frame(rng) -> bytes:
    kind = rng.integers(0, 4)
    if kind == 0:
        return rng.bytes(int(rng.integers(0, 64)))
    msg_type = int(rng.integers(0, 10))
    payload = rng.bytes(int(rng.integers(0, 48)))
    frame = bytearray(wire.MAGIC + struct.pack(">BI", msg_type, len(payload)) + payload)
    if kind == 1 and frame:
        for _ in range(int(rng.integers(1, 4))):
            frame[int(rng.integers(0, len(frame)))] = int(rng.integers(0, 256))
    elif kind == 2:
        frame = frame[:int(rng.integers(0, len(frame) + 1))]
    return bytes(frame)


PAYLOAD_PARSERS = {
    MsgType.HELLO: wire.parse_hello,
    MsgType.ASSIGN: wire.parse_json,
    MsgType.DATA: wire.parse_data,
    MsgType.PROGRESS: wire.parse_progress,
    MsgType.RESULT: wire.parse_tensors,
    MsgType.ERROR: wire.parse_json,
}


def _fuzz(n: int, seed: int = 0) -> tuple[int, int, list]:
    rng = np.random.default_rng(seed)
    typed = accepted = 0
    crashes = []
    for _ in range(n):
        frame = _random_frame(rng)
        try:
            msg = wire.decode(frame)
            parser = PAYLOAD_PARSERS.get(msg.type)
            if parser is not None:
                parser(msg.payload)
            accepted += 1
        except ProtocolError:
            typed += 1
        except Exception as exc:  # any other exception counts as a crash
            crashes.append(f"{type(exc).__name__}: {exc}")
    return typed, accepted, crashes


def _live_fuzz(n: int, seed: int = 1) -> list:
    """Send random frames to live workers; each must answer with ERROR or stay silent, never die untyped."""
    rng = np.random.default_rng(seed)
    crashes = []
    for _ in range(n):
        w = Worker("127.0.0.1:0", timeout=5)
        outcome = []

        def serve():
            try:
                w.serve()
                outcome.append(None)
            except (ProtocolError, OSError) as exc:
                outcome.append(exc)
            except Exception as exc:  # untyped failure
                outcome.append(exc)
                crashes.append(f"{type(exc).__name__}: {exc}")

        t = threading.Thread(target=serve, daemon=True)
        t.start()
        host, port = w.address
        with socket.create_connection((host, port), timeout=5) as s:
            try:  # the worker may hang up as soon as it has rejected the frame
                s.sendall(_random_frame(rng))
                s.shutdown(socket.SHUT_WR)
                while s.recv(4096):
                    pass
            except OSError:
                pass
        t.join(10)
        if t.is_alive():
            crashes.append("worker hung")
    return crashes


def test_distributed_equivalence(report_criterion, mnist):
    spec = NetworkSpec([MemristorLayer(784, 64), MemristorLayer(64, 32)], (32, 10))
    cfg = TrainConfig(iterations_per_unit=60, seed=0, readout_epochs=5)
    endpoints, threads = _serve_workers(2)
    run = coordinator_run(spec, (mnist.X_train[:1000], mnist.y_train[:1000]), endpoints, DistributedConfig(cfg, 20, 60))
    for t in threads:
        t.join(30)
    oracle = sequential_oracle(spec, mnist.X_train[:1000], mnist.y_train[:1000], cfg)
    bitwise = all(np.array_equal(r.params[k], ref[k]) for r, ref in zip(run.results, oracle) for k in ref)
    quiet = [run.log.frames_during_training(c) for c in run.log.connections()]
    typed, accepted, crashes = _fuzz(100_000)
    crashes += _live_fuzz(200)
    ok = bitwise and quiet == [0, 0] and not crashes
    detail = (f"bitwise {bitwise}, frames during training {quiet}, fuzz 100000 frames: {typed} typed errors, "
              f"{accepted} well-formed, {len(crashes)} crashes")
    assert report_criterion(9, "distributed equivalence and no-sync", ok, detail)


# -- 10. CLI determinism -----------------------------------------------------------

CLI_CONFIG = {
    "seed": 11,
    "dataset": {"name": "blobs", "blobs_per_class": 50, "held_out": [3]},
    "network": {"layers": [{"type": "memristor", "rows": 16, "cols": 12},
                           {"type": "optical", "n_in": 12, "n_out": 32, "readout_dim": 8}],
                "final_readout": [8, 4]},
    "train": {"iterations_per_unit": 20, "batch_size": 40, "optimizer": {"lr": 0.01}, "readout_epochs": 5},
    "unsup": {"checkpoints": [5, 10]},
    "rl": {"config": {"episodes": 6, "learning_starts": 40, "batch_size": 16}},
    "bench": {"baseline": {"epochs": 2}},
}


def _free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def _cli_session(cfg: Path, out: Path) -> dict:
    base = ["--config", str(cfg), "--out", str(out), "--quiet"]
    codes = {}
    for command in ("train", "eval", "probe", "export-features", "export-infoplane", "fault", "unsup", "rl", "bench"):
        codes[command] = main([command, *base])
    ports = [_free_port(), _free_port()]
    workers = [threading.Thread(target=lambda p=p: codes.setdefault(f"worker:{p}", main(
        ["worker", "--listen", f"127.0.0.1:{p}", "--config", str(cfg), "--quiet"])), daemon=True) for p in ports]
    for t in workers:
        t.start()
    time.sleep(0.5)
    codes["coordinator"] = main(["coordinator", "--config", str(cfg), "--out", str(out / "dist"), "--quiet",
                                 "--workers", ",".join(f"127.0.0.1:{p}" for p in ports)])
    for t in workers:
        t.join(30)
    return codes


def test_cli_determinism(report_criterion, tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps(CLI_CONFIG))
    outs = [tmp_path / "first", tmp_path / "second"]
    codes = [_cli_session(cfg, out) for out in outs]
    files = [sorted(p.relative_to(out) for p in out.rglob("*") if p.is_file()) for out in outs]
    differing = [str(p) for p in files[0] if (outs[0] / p).read_bytes() != (outs[1] / p).read_bytes()]
    all_zero = all(c == 0 for run in codes for c in run.values())
    ok = all_zero and files[0] == files[1] and not differing and len(files[0]) >= 15
    detail = (f"{len(codes[0])} commands, exit codes all zero {all_zero}, {len(files[0])} artifacts, "
              f"differing {differing or 'none'}")
    assert report_criterion(10, "CLI determinism", ok, detail)
