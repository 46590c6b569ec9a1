"""Acceptance criteria, one test each; a PASS/FAIL line per criterion is printed."""

import contextlib
import math
import time

import numpy as np
import pytest

from rstmri import dmt4, sadxnet
from rstmri.cli import EXIT_USAGE, main
from rstmri.diffcore import CASES, Tensor, grad_check
from rstmri.kspace import dft2_frames, idft2_frames, make_vista_mask, undersample
from rstmri.metrics import LossWeights, SsimParams, composite_loss, l1_loss, ms_ssim, psnr_db, psnr_loss, rmse, ssim
from rstmri.phantom import PhantomSpec, generate_cine
from rstmri.rst import RstVariant, count_params, init_params, rst_forward
from rstmri.swin3d import count_regions, window_partition
from rstmri.trainer import ExperimentConfig, run_experiment

import oracles
from composites import rst_gradcheck, sadxnet_gradcheck, sw_msa_oracle_case
from conftest import ACCEPTANCE


@contextlib.contextmanager
def criterion(n, title, elapsed=0.0):
    start = time.perf_counter() - elapsed
    status = "FAIL"
    try:
        yield
        status = "PASS"
    finally:
        line = f"criterion {n:>2} {status}  {title} ({time.perf_counter() - start:.1f}s)"
        ACCEPTANCE[n] = line
        print(line)


def test_criterion_01_window_shift_arithmetic():
    with criterion(1, "8 windows and 27 shifted regions on an 8x8x8 grid"):
        start = time.perf_counter()
        grid = Tensor(np.zeros((1, 8, 8, 8, 3)))
        assert window_partition(grid, (4, 4, 4)).shape[0] == 8
        assert count_regions((8, 8, 8), (4, 4, 4), (2, 2, 2)) == 27
        assert time.perf_counter() - start < 1.0


def test_criterion_02_sw_msa_oracle():
    with criterion(2, "shifted-window attention equals per-region attention, 25 instances"):
        start = time.perf_counter()
        worst = max(sw_msa_oracle_case(seed)[0] for seed in range(25))
        print(f"max abs diff {worst:.3e}")
        assert worst < 1e-5
        assert time.perf_counter() - start < 30


def test_criterion_03_gradient_suite():
    with criterion(3, "finite-difference gradients: primitives, SADXNet, reduced RST"):
        start = time.perf_counter()
        failed = {}
        for op in sorted(CASES):
            r = grad_check(op, trials=10, tol=1e-4)
            if not r.passed:
                failed[op] = r.max_rel_err
        assert not failed, failed
        sadx = max(sadxnet_gradcheck(seed) for seed in range(3))
        rst = max(rst_gradcheck(seed) for seed in range(2))
        print(f"{len(CASES)} primitives ok; SADXNet {sadx:.3e}; RST {rst:.3e}")
        assert sadx < 1e-3 and rst < 1e-3
        assert time.perf_counter() - start < 300


def test_criterion_04_loss_identities():
    with criterion(4, "loss identities and degeneracies"):
        r = np.random.default_rng(4)
        p = SsimParams(scales=2)
        x = r.random((3, 32, 32))
        assert l1_loss(x, x) == 0.0
        assert ms_ssim(x, x, p) == 1.0
        assert psnr_loss(x, x, p) == 10.0
        assert composite_loss(x, x, LossWeights(0.5, 0.5), p) == -5.0
        y = r.random((3, 32, 32))
        assert abs(composite_loss(x, y, LossWeights(1.0, 0.5), p) + psnr_loss(x, y, p)) < 1e-7
        assert abs(composite_loss(x, y, LossWeights(0.0, 0.0), p) - l1_loss(x, y)) < 1e-7


def test_criterion_05_metric_analytics():
    with criterion(5, "rmse/psnr under constant offsets; SSIM and MS-SSIM against brute force"):
        r = np.random.default_rng(5)
        for delta in (0.5, 0.1, -0.03, 1e-3):
            x = r.uniform(0.05, 0.45, (4, 32, 32))
            y = x + delta
            assert abs(rmse(x, y) - abs(delta)) < 1e-6
            assert abs(psnr_db(x, y) + 20 * math.log10(abs(delta))) < 1e-6
        p = SsimParams(scales=2)
        worst = 0.0
        for _ in range(10):
            x = r.random((32, 32))
            y = np.clip(x + 0.2 * r.standard_normal((32, 32)), 0, 1)
            worst = max(worst, abs(ssim(x, y) - oracles.ssim(x, y)))
            worst = max(worst, abs(ms_ssim(x, y, p) - oracles.ms_ssim(x, y, 2)))
        assert worst < 1e-6


def test_criterion_06_forward_model():
    with criterion(6, "DFT roundtrip and energy; VISTA row count; R=1 passthrough"):
        r = np.random.default_rng(6)
        x = r.random((4, 32, 32, 1)).astype(np.float32)
        assert np.max(np.abs(idft2_frames(dft2_frames(x)) - x)) < 1e-6
        z = r.standard_normal((2, 24, 20, 1)) + 1j * r.standard_normal((2, 24, 20, 1))
        e0 = math.fsum(np.abs(z).ravel() ** 2)
        e1 = math.fsum(np.abs(dft2_frames(z)).ravel() ** 2)
        assert abs(e0 - e1) / e0 < 1e-5
        m = make_vista_mask(8, 144, 32, 9, 0)
        assert all(int(f[:, 0].sum()) == 16 for f in m)
        k = dft2_frames(generate_cine(PhantomSpec(frames=4, seed=6)))
        assert np.array_equal(undersample(k, make_vista_mask(4, 32, 32, 1, 0)), k)


DIMS = [
    (1, 16, 16, 1), (2, 16, 16, 1), (3, 16, 24, 1), (4, 32, 32, 1), (5, 20, 28, 1), (8, 32, 16, 1),
    (2, 48, 32, 1), (6, 24, 24, 1), (2, 16, 16, 2), (4, 16, 32, 2), (3, 12, 20, 1), (8, 32, 32, 1),
]


def test_criterion_07_shape_contracts():
    with criterion(7, "RST and SADXNet preserve dims over 12 combinations; T < S < B < L"):
        v = RstVariant.get("t")
        params = {1: init_params(v, dtype=np.float32)}
        scfg = {1: sadxnet.SadxConfig(1)}
        for dims in DIMS:
            z = dims[-1]
            if z not in params:
                v = RstVariant.get("t", channels=z)
                params[z] = init_params(v, dtype=np.float32)
                scfg[z] = sadxnet.SadxConfig(z)
            x = np.random.default_rng(7).random(dims).astype(np.float32)
            out = rst_forward(x, params[z], RstVariant.get("t", channels=z))
            assert out.shape == dims
            sp = sadxnet.init_params(scfg[z])
            assert sadxnet.restore_sequence(x, sp, scfg[z]).shape == dims
        counts = [count_params(RstVariant.get(n)) for n in "tsbl"]
        print("parameter counts", counts)
        assert counts[0] < counts[1] < counts[2] < counts[3]


@pytest.fixture(scope="module")
def experiment():
    start = time.perf_counter()
    res = run_experiment(ExperimentConfig())
    return res, time.perf_counter() - start


@pytest.mark.slow
def test_criterion_08_desk_experiment(experiment):
    res, elapsed = experiment
    with criterion(8, "desk-scale SADXNet + RST beats zero-filled on held-out phantoms", elapsed):
        rows = res.report["sequences"]
        assert len(rows) == 4
        for row in rows:
            zf, model = row["zero_filled"]["rmse"], row["sadxnet+rst"]["rmse"]
            print(f"{row['name']}: zero-filled {zf:.4f}  pipeline {model:.4f}")
            assert model < zf
        agg = res.report["aggregate"]
        zf_mean, model_mean = agg["zero_filled"]["rmse"]["mean"], agg["sadxnet+rst"]["rmse"]["mean"]
        print(f"mean rmse {model_mean:.4f} vs {zf_mean:.4f} (ratio {model_mean / zf_mean:.3f}); {elapsed:.0f}s")
        assert model_mean <= 0.7 * zf_mean
        assert elapsed <= 30 * 60


@pytest.mark.slow
def test_criterion_09_determinism(experiment):
    with criterion(9, "strict reruns are bit-identical"):
        for seed in range(5):
            assert make_vista_mask(8, 144, 32, 9, seed).tobytes() == make_vista_mask(8, 144, 32, 9, seed).tobytes()
            spec = PhantomSpec(frames=8, seed=seed)
            assert generate_cine(spec).tobytes() == generate_cine(spec).tobytes()
        first, _ = experiment
        again = run_experiment(ExperimentConfig())
        for a, b in ((first.sadx, again.sadx), (first.rst, again.rst)):
            assert np.array(a.losses).tobytes() == np.array(b.losses).tobytes()
            sa, sb = a.params.state_dict(), b.params.state_dict()
            assert all(sa[k].tobytes() == sb[k].tobytes() for k in sa)
        for s, t in zip(first.test, again.test):
            assert s.truth.tobytes() == t.truth.tobytes() and s.mask.tobytes() == t.mask.tobytes()


def test_criterion_10_cli_robustness(tmp_path, capsys):
    with criterion(10, "DMT4 roundtrip for all dtypes; 20 malformed files exit 2"):
        r = np.random.default_rng(10)
        arrays = [
            r.standard_normal((2, 3, 4, 1)).astype(np.float32),
            (r.standard_normal((3, 5)) + 1j * r.standard_normal((3, 5))).astype(np.complex64),
            r.integers(0, 256, (4, 6, 2), dtype=np.uint8),
        ]
        for a in arrays:
            b = dmt4.decode(dmt4.encode(a))
            assert b.dtype == a.dtype and b.shape == a.shape and b.tobytes() == a.tobytes()
        good = tmp_path / "good.dmt4"
        dmt4.write(good, np.zeros((2, 16, 16, 1), np.float32))
        bad = tmp_path / "bad.dmt4"
        codes = {}
        for name, blob in oracles.malformed_corpus().items():
            bad.write_bytes(blob)
            codes[name] = main(["eval", "--pred", str(bad), "--truth", str(good)])
        capsys.readouterr()
        assert codes == {name: EXIT_USAGE for name in codes}
