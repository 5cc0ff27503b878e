"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 5 and 6 share one session-scoped set of pretraining runs (about
20 minutes on one CPU core), so run this module on its own with
``pytest tests/test_acceptance.py -s`` to see the lines as they land.
"""

import csv
import math
import time
import zlib

import numpy as np
import pytest

from mvc import tensor as T
from mvc.cli import main
from mvc.contrastive import ContrastiveConfig, MemoryBank, contrastive_loss, random_unit_rows, symmetric_loss
from mvc.data import SynthConfig, generate_synthetic
from mvc.nn import CmcModel
from mvc.optim import FINETUNE_RECIPE, PRETRAIN_RECIPE, PROBE_PRESETS, MultiStepSchedule
from mvc.train import PretrainConfig, Pretrainer
from mvc.transfer import ProbeConfig, macro_map, run_linear_probe
from mvc.views import (
    SENTINEL2_BANDS,
    band_split_indices,
    band_statistics,
    fixed_band_spec,
    lab_spec,
    pca_fit,
    pca_partition,
    rgb_to_lab,
    sample_pixels,
)
from oracles import brute_force_macro_map, cie_lab_pixel, cmc_gradient_error, gradcheck, jacobi_eigh, naive_conv2d
from test_tensor import OPS

SEEDS = (0, 1, 2)
PRETRAIN_EPOCHS = 100


# -- 1: gradients ------------------------------------------------------------------------


def test_criterion_1_gradients_match_finite_differences(verdict):
    start = time.perf_counter()
    op_worst = {}
    for name, build, shapes in OPS:
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        inputs = [rng.uniform(0.2, 1.5, s) * rng.choice([-1, 1], s) for s in shapes]
        op_worst[name] = gradcheck(build, inputs)
    # default encoder widths and projection, 32x32 chips, both positive variants
    model_worst, checked, skipped = 0.0, 0, 0
    for positive in ("live", "bank"):
        w, c, s = cmc_gradient_error([16, 32, 64, 64], embedding_dim=64, d_h=32, size=32, per_tensor=12,
                                     positive=positive)
        model_worst, checked, skipped = max(model_worst, w), checked + c, skipped + s
    elapsed = time.perf_counter() - start
    worst_op = max(op_worst, key=op_worst.get)
    ok = max(op_worst.values()) < 1e-4 and model_worst < 1e-4 and checked > 500 and elapsed < 120
    verdict(1, ok, f"ops worst {op_worst[worst_op]:.1e} ({worst_op}), encoder+loss worst {model_worst:.1e} "
                   f"over {checked} coords ({skipped} kink-skipped), {elapsed:.0f}s")


# -- 2: loss anchors ---------------------------------------------------------------------


def test_criterion_2_closed_form_loss_anchors(verdict):
    errors = []
    with T.precision("float64"):
        for k in (1, 7, 4096):
            v = random_unit_rows(1, 16, np.random.default_rng(k))
            anchor = np.repeat(v, 2, axis=0)
            negatives = np.broadcast_to(v[None], (2, k, 16)).copy()
            errors.append(abs(contrastive_loss(anchor, anchor, negatives, 0.07).item() - math.log(k + 1)))

            bank = MemoryBank(k + 3, 16)
            bank.bank1 = bank.bank2 = np.repeat(v, k + 3, axis=0)
            h = T.Tensor(np.repeat(v, 3, axis=0))
            loss = symmetric_loss(h, h, bank, ContrastiveConfig(k=k), indices=[0, 1, 2], rng=np.random.default_rng(0))
            errors.append(abs(loss.item() - 2 * math.log(k + 1)))
        single = contrastive_loss(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]]), np.array([[[0.0, 1.0]]]), 1.0)
        single_err = abs(single.item() - math.log(1 + math.exp(-1)))
    ok = max(errors) < 1e-5 and single_err < 1e-6
    verdict(2, ok, f"uniform/symmetric worst {max(errors):.1e}, B=1 k=1 error {single_err:.1e}")


# -- 3: oracles --------------------------------------------------------------------------


def test_criterion_3_oracle_equivalences(verdict):
    rng = np.random.default_rng(3)
    with T.precision("float64"):
        conv = 0.0
        for stride, pad in ((1, 0), (2, 1), (1, 2)):
            x, k = rng.standard_normal((2, 4, 9, 9)), rng.standard_normal((3, 4, 3, 3))
            ref = naive_conv2d(x, k, stride, pad)
            conv = max(conv, np.abs(T.conv2d(x, k, stride, pad).data - ref).max() / np.abs(ref).max())

    a = rng.standard_normal((10, 10))
    cov = a @ a.T + 0.1 * np.eye(10)
    pixels = rng.multivariate_normal(np.zeros(10), cov, size=12 * 256)
    chips = pixels.reshape(12, 16, 16, 10).transpose(0, 3, 1, 2)
    basis = pca_fit(chips, 144, seed=7)
    sample = sample_pixels(chips, 144, 7)
    vals, vecs = jacobi_eigh(np.cov(sample, rowvar=False))
    eig_err = np.max(np.abs(basis.eigenvalues - vals) / vals)
    vec_err = max(abs(abs(basis.basis[:, i] @ vecs[:, i]) - 1) for i in range(10))

    map_err = 0.0
    for _ in range(200):
        n, c = int(rng.integers(2, 12)), int(rng.integers(1, 6))
        scores = rng.integers(0, 4, (n, c)).astype(float)
        targets = rng.integers(0, 2, (n, c))
        targets[rng.integers(n), rng.integers(c)] = 1
        map_err = max(map_err, abs(macro_map(scores, targets) - brute_force_macro_map(scores, targets)))

    rgb = rng.random((3, 6, 6))
    lab = rgb_to_lab(rgb)
    ref = np.array([cie_lab_pixel(*rgb[:, i, j]) for i in range(6) for j in range(6)]).T.reshape(3, 6, 6)
    lab_err = np.abs(lab - ref).max()
    white = rgb_to_lab(np.ones((3, 1, 1))).ravel().tolist()
    black = rgb_to_lab(np.zeros((3, 1, 1))).ravel().tolist()

    ok = (conv < 1e-12 and eig_err < 1e-6 and vec_err < 1e-6 and map_err < 1e-12 and lab_err <= 0.01
          and white == [100.0, 0.0, 0.0] and black == [0.0, 0.0, 0.0])
    verdict(3, ok, f"conv {conv:.1e}, eigvals {eig_err:.1e}, eigvecs {vec_err:.1e}, mAP {map_err:.1e} "
                   f"(200 cases), Lab {lab_err:.1e}, white {white}, black {black}")


# -- 4: partitions and presets -----------------------------------------------------------


def test_criterion_4_partitions_and_presets(verdict):
    idx1, idx2 = band_split_indices(SENTINEL2_BANDS)
    bands = ([SENTINEL2_BANDS[i] for i in idx1], [SENTINEL2_BANDS[i] for i in idx2])
    pcs = pca_partition(np.arange(10, 0, -1))
    opt = PRETRAIN_RECIPE.optimizer
    cfg = PretrainConfig()
    pretrain = (cfg.k, cfg.tau, opt.kind, opt.lr, opt.momentum, opt.weight_decay, PRETRAIN_RECIPE.schedule)
    probes = {n: (r.epochs, r.batch_size, r.optimizer.kind, r.schedule) for n, r in PROBE_PRESETS.items()}
    ft = FINETUNE_RECIPE
    finetune = (ft.epochs, ft.batch_size, ft.optimizer.lr, ft.optimizer.weight_decay, ft.schedule)
    ok = (
        bands == (["2", "8", "8A", "11", "12"], ["3", "4", "5", "6", "7"])
        and pcs == ([0, 6, 7, 8, 9], [1, 2, 3, 4, 5])
        and pretrain == (4096, 0.07, "sgd", 0.03, 0.9, 1e-4, MultiStepSchedule((250, 300, 350), 10))
        and all(p == (50, 256, "adam", MultiStepSchedule((30, 35, 40, 45), 5)) for p in probes.values())
        and finetune == (100, 100, 1e-4, 1e-4, MultiStepSchedule((60, 70, 80, 90), 5))
    )
    verdict(4, ok, f"bands {bands}, pcs {pcs}, pretrain {pretrain[:6]}, probe presets {sorted(probes)}, "
                   f"finetune {finetune[:4]}")


# -- 5 and 6: directional benefits -------------------------------------------------------


@pytest.fixture(scope="session")
def directional_runs():
    """Probe accuracies on the 2,000-chip synthetic set: random init, bands CMC, lab CMC."""
    data = generate_synthetic(SynthConfig(num_chips=2000, seed=0))
    bands = fixed_band_spec(band_statistics(data.chips[data.split("train")]), data.band_names)
    lab = lab_spec()
    runs = {"random": [], "bands": [], "lab": [], "seconds": {}}
    for name, spec in (("bands", bands), ("lab", lab)):
        start = time.perf_counter()
        for seed in SEEDS:
            trainer = Pretrainer(data, spec, PretrainConfig(epochs=PRETRAIN_EPOCHS, seed=seed))
            trainer.run()
            runs[name].append(run_linear_probe(trainer.model, data, spec, ProbeConfig(seed=seed))[1].value)
        runs["seconds"][name] = time.perf_counter() - start
    for seed in SEEDS:
        model = CmcModel.for_views(*bands.view_channels, seed=seed)
        runs["random"].append(run_linear_probe(model, data, bands, ProbeConfig(seed=seed))[1].value)
    return runs


def test_criterion_5_pretraining_beats_random_init(verdict, directional_runs):
    runs = directional_runs
    gap = float(np.median(runs["bands"]) - np.median(runs["random"]))
    seconds = runs["seconds"]["bands"]
    ok = gap >= 0.10 and seconds < 30 * 60
    verdict(5, ok, f"bands CMC {runs['bands']} vs random {runs['random']}, median gap {gap:+.3f}, "
                   f"pretraining {seconds / 60:.1f} min")


def test_criterion_6_ten_bands_beat_lab(verdict, directional_runs):
    runs = directional_runs
    margin = float(np.median(runs["bands"]) - np.median(runs["lab"]))
    verdict(6, margin > 0, f"bands {runs['bands']} vs lab {runs['lab']}, median margin {margin:+.3f}")


# -- 7: determinism ----------------------------------------------------------------------


def _ledger_values(path):
    with path.open() as fh:
        return [row["value"] for row in csv.DictReader(fh)]


def test_criterion_7_determinism(verdict, tmp_path):
    assert main(["synth", "--out", str(tmp_path / "ds"), "--num-chips", "200", "--seed", "5"]) == 0
    common = ["--dataset", str(tmp_path / "ds"), "--views", "bands", "--batch-size", "25", "--seed", "1"]
    ledger = tmp_path / "ledger.csv"
    for run in ("a", "b"):
        assert main(["pretrain", *common, "--epochs", "3", "--out", str(tmp_path / run)]) == 0
        assert main(["probe", "--checkpoint", str(tmp_path / run), "--dataset", str(tmp_path / "ds"),
                     "--ledger", str(ledger)]) == 0
    first, second = _ledger_values(ledger)

    assert main(["pretrain", *common, "--epochs", "4", "--out", str(tmp_path / "straight")]) == 0
    assert main(["pretrain", *common, "--epochs", "2", "--out", str(tmp_path / "resumed")]) == 0
    assert main(["pretrain", *common, "--epochs", "4", "--out", str(tmp_path / "resumed"), "--resume"]) == 0
    files = sorted(p.relative_to(tmp_path / "straight") for p in (tmp_path / "straight").rglob("*.bin"))
    same = [(tmp_path / "straight" / f).read_bytes() == (tmp_path / "resumed" / f).read_bytes() for f in files]
    logs = [(tmp_path / d / "train_log.csv").read_text() for d in ("straight", "resumed")]
    ok = first == second and len(files) > 0 and all(same) and logs[0] == logs[1]
    verdict(7, ok, f"rerun ledger values {first} / {second}; resume matches on {sum(same)}/{len(files)} "
                   f"state arrays and the loss log")


# -- 8: training sanity ------------------------------------------------------------------


def test_criterion_8_smoke_run_beats_uniform_loss(verdict):
    data = generate_synthetic(SynthConfig(num_chips=2000, seed=0))
    spec = fixed_band_spec(band_statistics(data.chips[data.split("train")]), data.band_names)
    trainer = Pretrainer(data, spec, PretrainConfig(epochs=5))
    history = trainer.run()
    uniform = 2 * math.log(trainer.k + 1)
    verdict(8, history[-1] < uniform, f"epoch losses {[round(h, 3) for h in history]}, final {history[-1]:.3f} "
                                      f"vs uniform 2*log({trainer.k}+1) = {uniform:.3f}")
