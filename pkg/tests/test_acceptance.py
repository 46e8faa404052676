"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py`` (the summary lines are
printed at the end of the session) or ``python tests/test_acceptance.py``.
"""
import inspect
import math
import re
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))
import gradcheck  # noqa: E402

from fedload import federated  # noqa: E402
from fedload.data import (  # noqa: E402
    FULL_SPLIT,
    HouseholdDataset,
    MinMaxStats,
    ParseError,
    PowerTrace,
    SynthConfig,
    demo_appliances,
    duty_cycle_household,
    ingest_channel,
    make_windows,
    split_train_test,
    synth_household,
)
from fedload.diffcore import ParamTree  # noqa: E402
from fedload.experiments import COMPARE_MODELS, ExperimentSpec, compare_models, mean_mae, run_experiment  # noqa: E402
from fedload.federated import Client, ClientUpdate, FederatedConfig, fedavg, robustness_sweep, run_federated  # noqa: E402
from fedload.metrics import mae, rmse  # noqa: E402
from fedload.models import ForecastConfig, build_forecaster, train_supervised  # noqa: E402

RESULTS: dict[int, str] = {}
DESK = ForecastConfig(window_len=32, layer1_hidden=16, layer2_hidden=8, batch_size=32, lr=0.001)


def report(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    print(RESULTS[n])
    assert ok, RESULTS[n]


# 1 ---------------------------------------------------------------------------

def test_criterion_1_gradient_oracle():
    t0 = time.time()
    checks = {
        "conv1d": gradcheck.check_conv1d,
        "lstm cell": gradcheck.check_lstm_cell,
        "2-layer BiLSTM": gradcheck.check_bilstm_stack,
        "attention": gradcheck.check_attention,
        "dense head": gradcheck.check_dense,
        "forecaster": gradcheck.check_forecaster,
    }
    worst = {name: max(fn(seed) for seed in range(20)) for name, fn in checks.items()}
    elapsed = time.time() - t0
    ok = all(v < 1e-4 for v in worst.values()) and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(1, ok, f"worst rel err over 20 seeds: {detail}; {elapsed:.0f} s")


# 2 ---------------------------------------------------------------------------

def test_criterion_2_fedavg_algebra():
    rng = np.random.default_rng(0)
    p = ParamTree({"a": rng.normal(size=(4, 3)), "b": rng.normal(size=7) * 1e3})
    same = max(float(np.max(np.abs(fedavg([p] * n)[k] - p[k]))) for n in (2, 3, 5, 10) for k in p)
    pair = fedavg([ParamTree({"t": np.array([1.0])}), ParamTree({"t": np.array([3.0])})])["t"][0]
    single = fedavg([p]) == p
    sets = [ParamTree({"w": rng.normal(size=5)}) for _ in range(4)]
    keys, w = ["c1", "c2", "c3", "c4"], [0.1, 0.2, 0.3, 0.4]
    ref = fedavg(sets, w, keys)["w"]
    perm_ok = all(
        fedavg([sets[i] for i in perm], [w[i] for i in perm], [keys[i] for i in perm])["w"].tobytes() == ref.tobytes()
        for perm in ([3, 2, 1, 0], [1, 3, 0, 2], [2, 0, 3, 1])
    )
    ok = same <= 1e-15 and pair == 2.0 and single and perm_ok
    report(2, ok, f"identical-set error {same:.1e}, {{1}},{{3}} -> {pair}, single identity {single}, "
                  f"permutation invariant {perm_ok}")


# 3 ---------------------------------------------------------------------------

def test_criterion_3_centralized_equivalence():
    t0 = time.time()
    cfg = ForecastConfig(window_len=4, layer1_hidden=3, layer2_hidden=2, batch_size=5, lr=0.01, seed=11)
    z = 0.5 + 0.4 * np.sin(np.arange(40) / 3.0)
    data = make_windows(z, 4)
    R, E = 4, 3
    fed, _ = run_federated([Client("solo", data)], FederatedConfig(rounds=R, local_epochs=E, forecast=cfg, seed=11))
    central, _ = train_supervised(build_forecaster(cfg), data, R * E, seed=11)
    diff = max(float(np.max(np.abs(fed.params[k] - central.params[k]))) for k in fed.params)
    moved = max(float(np.max(np.abs(fed.params[k] - build_forecaster(cfg).params[k]))) for k in fed.params)
    elapsed = time.time() - t0
    report(3, diff <= 1e-12 and moved > 0 and elapsed < 120,
           f"R={R} x E={E} vs {R * E} centralized epochs: max |diff| {diff:.1e} (params moved {moved:.2e}); "
           f"{elapsed:.1f} s")


# 4 ---------------------------------------------------------------------------

def test_criterion_4_metric_oracles():
    rng = np.random.default_rng(4)
    worst, ineq = 0.0, True
    for _ in range(1000):
        n = int(rng.integers(1, 100))
        a, b = rng.normal(size=n), rng.normal(size=n)
        fold_abs = fold_sq = 0.0
        for x, y in zip(a, b):
            fold_abs += abs(x - y)
            fold_sq += (x - y) ** 2
        worst = max(worst, abs(mae(a, b) - fold_abs / n), abs(rmse(a, b) - math.sqrt(fold_sq / n)))
        ineq &= rmse(a, b) >= mae(a, b)
    worked = mae([0.0, 0.0], [1.0, 3.0]) == 2.0 and rmse([0.0, 0.0], [3.0, 4.0]) == math.sqrt(12.5)
    report(4, worst <= 1e-12 and ineq and worked,
           f"fold oracle max err {worst:.1e} on 1000 vectors, rmse >= mae {ineq}, worked values exact {worked}")


# 5 ---------------------------------------------------------------------------

def _aggregate_clients(n_houses, n_train, n_val, W):
    clients, vx, vy = [], [], []
    for s in range(n_houses):
        agg = duty_cycle_household(s, n_train + n_val).aggregate.values
        z = MinMaxStats.fit(agg[:n_train]).normalize(agg)
        clients.append(Client(f"house{s + 1}", make_windows(z[:n_train], W)))
        v = make_windows(z[n_train - W:], W)
        vx.append(v.X)
        vy.append(np.clip(v.y, 0.0, 1.0))
    return clients, (np.concatenate(vx), np.concatenate(vy))


def test_criterion_5_synthetic_convergence():
    t0 = time.time()
    clients, val = _aggregate_clients(5, 320, 60, DESK.window_len)
    res = run_federated(clients, FederatedConfig(rounds=20, local_epochs=5, client_fraction=1.0, forecast=DESK), val)
    r0, rT = math.sqrt(res.initial_val_loss), math.sqrt(res.logs[-1].global_val_loss)
    conv_ok = rT <= 0.5 * r0

    small, sval = _aggregate_clients(5, 192, 40, DESK.window_len)
    curves = robustness_sweep(small, FederatedConfig(rounds=3, forecast=DESK), [5, 50, 80], [0.5, 1.0], sval)
    trend = {k: (c.initial_loss, c.losses[-1]) for k, c in curves.items()}
    sweep_ok = len(curves) == 6 and all(len(c.losses) == 3 for c in curves.values()) and all(
        fin <= ini for ini, fin in trend.values())
    elapsed = time.time() - t0
    cells = ", ".join(f"E{e}/C{c}: {ini:.4f}->{fin:.4f}" for (e, c), (ini, fin) in sorted(trend.items()))
    report(5, conv_ok and sweep_ok and elapsed < 900,
           f"val RMSE {r0:.4f} -> {rT:.4f} ({1 - rT / r0:.0%} lower); sweep {cells}; {elapsed:.0f} s")


# 6 ---------------------------------------------------------------------------

def test_criterion_6_integrated_vs_direct():
    t0 = time.time()
    wins, parts = 0, []
    for seed in range(3):
        ds = duty_cycle_household(seed, 700)
        spec = ExperimentSpec(epochs=20, forecast=replace(DESK, seed=seed))
        mi = run_experiment(spec, [ds]).report_watts.mae
        md = run_experiment(replace(spec, mode="direct"), [ds]).report_watts.mae
        wins += mi <= md
        parts.append(f"seed {seed}: {mi:.1f} vs {md:.1f} W")
    elapsed = time.time() - t0
    report(6, wins >= 2 and elapsed < 600,
           f"integrated <= direct MAE in {wins}/3 seeds ({'; '.join(parts)}); {elapsed:.0f} s")


# 7 ---------------------------------------------------------------------------

def test_criterion_7_model_ordering():
    t0 = time.time()
    houses = [duty_cycle_household(s, 700, household_id=f"house{s + 1}") for s in range(5)]
    base = ExperimentSpec(epochs=20, forecast=DESK,
                          federated=FederatedConfig(rounds=20, local_epochs=5, forecast=DESK))
    rows = compare_models(houses, list(COMPARE_MODELS), base)
    m = {name: mean_mae(rows, name) for name in COMPARE_MODELS}
    elapsed = time.time() - t0
    ok = m["lstm"] >= m["bilstm_attention"] and m["feddl"] <= 1.25 * m["bilstm_attention"] and elapsed < 900
    report(7, ok, f"mean normalized MAE over 5 households: LSTM {m['lstm']:.4f}, "
                  f"BiLSTM-Attention {m['bilstm_attention']:.4f}, FedDL {m['feddl']:.4f} "
                  f"({m['feddl'] / m['bilstm_attention'] - 1:+.0%} vs centralized); {elapsed:.0f} s")


# 8 ---------------------------------------------------------------------------

def test_criterion_8_data_pipeline(tmp_path):
    ds = HouseholdDataset("h", PowerTrace(1372636800, 6, np.zeros(4320 * 10)))
    train, test = split_train_test(ds, FULL_SPLIT)
    split_ok = (len(train), len(test)) == (40700, 2500)
    syn = synth_household(SynthConfig(demo_appliances(), 5000, seed=8))
    total = np.zeros(5000)
    for k in sorted(syn.appliances):
        total = total + syn.appliances[k].values
    sum_ok = np.array_equal(total, syn.aggregate.values)
    x = np.random.default_rng(8).uniform(0, 3000, 10000)
    st = MinMaxStats.fit(x)
    rt = float(np.max(np.abs(st.denormalize(st.normalize(x)) - x)))
    bad = tmp_path / "channel_2.dat"
    bad.write_text("1372636800 10.0\n1372636806 11.5\n1372636812 oops\n")
    try:
        ingest_channel(bad)
        parse_msg = None
    except ParseError as exc:
        parse_msg = str(exc)
    parse_ok = parse_msg is not None and "line 3" in parse_msg
    report(8, split_ok and sum_ok and rt <= 1e-9 and parse_ok,
           f"split {len(train)}/{len(test)}, aggregate == sum {sum_ok}, normalization round trip {rt:.1e}, "
           f"malformed line reported as line 3 {parse_ok}")


# 9 ---------------------------------------------------------------------------

def test_criterion_9_privacy_boundary():
    public = sorted(n for n, _ in inspect.getmembers(Client) if not n.startswith("_"))
    sig = inspect.signature(Client.train)
    ret_ok = sig.return_annotation in (ClientUpdate, "ClientUpdate")
    upd = ClientUpdate.__dataclass_fields__
    allowed = {"params": "ParamTree", "loss": "float", "n_samples": "int",
               "loss_history": "tuple[float, ...]", "opt_state": "AdamState | None"}
    types_ok = {k: str(f.type) for k, f in upd.items()} == allowed
    orchestrator_src = inspect.getsource(federated.run_federated)
    no_sample_access = re.search(r"\._samples\b", orchestrator_src) is None
    ok = public == ["n_samples", "train"] and ret_ok and types_ok and no_sample_access
    report(9, ok, f"client surface {public}, upload fields {sorted(upd)} (parameter trees, optimizer moments, "
                  f"scalar losses and a sample count), orchestrator never touches client samples {no_sample_access}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
