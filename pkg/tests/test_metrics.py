"""Metric tests; the brute-force references below are written straight from the formulas with loops."""

import json
import math
import warnings

import numpy as np
import pytest

from pamdenoise import io as pio
from pamdenoise import metrics
from pamdenoise.metrics import MetricWarning, RoiError, RoiSet, auto_rois, cnr, evaluate, psnr, snr, ssim


# ---------------------------------------------------------------- brute-force references


def ref_psnr(x, y):
    h, w = x.shape
    acc = 0.0
    for i in range(h):
        for j in range(w):
            acc += (x[i, j] - y[i, j]) ** 2
    return 10 * math.log10(1.0 / (acc / (h * w)))


def ref_ssim(x, y):
    win = [[math.exp(-((i - 5) ** 2 + (j - 5) ** 2) / (2 * 1.5**2)) for j in range(11)] for i in range(11)]
    total = sum(map(sum, win))
    win = [[v / total for v in row] for row in win]
    c1, c2 = 0.01**2, 0.03**2
    h, w = x.shape
    vals = []
    for r in range(h - 10):
        for c in range(w - 10):
            mx = my = sxx = syy = sxy = 0.0
            for i in range(11):
                for j in range(11):
                    a, b, k = x[r + i, c + j], y[r + i, c + j], win[i][j]
                    mx += k * a
                    my += k * b
                    sxx += k * a * a
                    syy += k * b * b
                    sxy += k * a * b
            vx, vy, cxy = sxx - mx * mx, syy - my * my, sxy - mx * my
            vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return sum(vals) / len(vals)


def _stats(img, box):
    x, y, w, h = box
    vals = [img[r][c] for r in range(y, y + h) for c in range(x, x + w)]
    m = sum(vals) / len(vals)
    var = sum((v - m) ** 2 for v in vals) / (len(vals) - 1)
    return m, var


def ref_snr(img, rois):
    means = [_stats(img, b)[0] for b in rois.signal]
    sb = math.sqrt(_stats(img, rois.background)[1])
    return 20 * math.log10((sum(means) / len(means)) / sb)


def ref_cnr(img, rois):
    mb, vb = _stats(img, rois.background)
    terms = []
    for b in rois.signal:
        mi, vi = _stats(img, b)
        terms.append(abs(mi - mb) / math.sqrt(vi + vb))
    return 20 * math.log10(sum(terms) / len(terms))


def _random_case(seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(16, 25, size=2)
    x, y = rng.uniform(0, 1, (h, w)), rng.uniform(0, 1, (h, w))
    bg = (0, 0, 6, 5)
    sig = [(int(rng.integers(7, w - 3)), int(rng.integers(6, h - 3)), 3, 3) for _ in range(4)]
    return x, y, RoiSet(sig, bg)


@pytest.mark.parametrize("seed", range(25))
def test_metrics_match_brute_force(seed):
    x, y, rois = _random_case(seed)
    assert abs(psnr(x, y) - ref_psnr(x, y)) < 1e-9
    assert abs(ssim(x, y) - ref_ssim(x, y)) < 1e-9
    assert abs(snr(x, rois) - ref_snr(x, rois)) < 1e-9
    assert abs(cnr(x, rois) - ref_cnr(x, rois)) < 1e-9


# ---------------------------------------------------------------- PSNR / SSIM


def test_psnr_closed_forms():
    ref = np.random.default_rng(0).uniform(0.2, 0.8, (16, 16))
    assert psnr(ref + 0.1, ref) == pytest.approx(20.0, abs=1e-12)
    assert psnr(ref + 0.05, ref) - psnr(ref + 0.1, ref) == pytest.approx(20 * math.log10(2), abs=1e-12)
    with pytest.warns(MetricWarning):
        assert psnr(ref, ref) == math.inf
    with pytest.raises(ValueError):
        psnr(ref, ref[:4])


def test_psnr_decreases_with_noise_variance():
    ref = np.random.default_rng(0).uniform(0, 1, (32, 32))
    means = []
    for sigma in (0.01, 0.03, 0.1):
        means.append(np.mean([psnr(ref + np.random.default_rng(s).normal(0, sigma, ref.shape), ref) for s in range(20)]))
    assert means[0] > means[1] > means[2]


def test_ssim_properties():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(0, 1, (20, 20)), rng.uniform(0, 1, (20, 20))
    assert abs(ssim(a, a) - 1.0) < 1e-12
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-15)
    assert -1 <= ssim(a, 1 - a) <= 1
    with pytest.raises(ValueError):
        ssim(a[:10], b[:10])


def test_ssim_checkerboard_vs_inverse():
    cb = (np.indices((16, 16)).sum(axis=0) % 2).astype(float)
    assert abs(ssim(cb, 1 - cb) - ref_ssim(cb, 1 - cb)) < 1e-9
    assert ssim(cb, 1 - cb) < 0


# ---------------------------------------------------------------- SNR / CNR


def _rois():
    return RoiSet([(2, 2, 4, 4), (10, 2, 4, 4), (2, 10, 4, 4), (10, 10, 4, 4)], (20, 20, 8, 8))


def test_snr_closed_form():
    img = np.full((30, 30), 10.0)
    bg = np.zeros((8, 8))
    bg[::2, ::2], bg[1::2, 1::2] = 1.0, 1.0  # sample std of this 0/1 pattern
    img[20:28, 20:28] = bg / np.std(bg, ddof=1)
    assert snr(img, _rois()) == pytest.approx(20.0, abs=1e-12)


def test_snr_scale_invariance_and_cnr_shift_invariance():
    img = np.random.default_rng(3).uniform(0.1, 1, (30, 30))
    r = _rois()
    assert snr(img * 3.7, r) == pytest.approx(snr(img, r), abs=1e-12)
    assert cnr(img + 0.4, r) == pytest.approx(cnr(img, r), abs=1e-12)


def test_snr_statistical_construction():
    vals = []
    for s in range(50):
        rng = np.random.default_rng(s)
        img = np.zeros((64, 64))
        r = RoiSet([(4, 4, 6, 6), (20, 4, 6, 6), (4, 20, 6, 6), (20, 20, 6, 6)], (32, 32, 32, 32))
        for x, y, w, h in r.signal:
            img[y:y + h, x:x + w] = 0.8
        img[32:, 32:] = rng.standard_normal((32, 32)) * 0.08
        vals.append(snr(img, r))
    assert abs(np.mean(vals) - 20.0) < 0.2


def test_snr_sentinels_and_errors():
    img = np.full((30, 30), 0.5)
    with pytest.warns(MetricWarning):
        assert snr(img, _rois()) == math.inf
    neg = np.random.default_rng(0).normal(-1, 0.1, (30, 30))
    with pytest.raises(RoiError):
        snr(neg, _rois())


def test_cnr_unit_ratio():
    img = np.zeros((30, 30))
    # sample variance 0.5 in each box: alternate +-a with a chosen so var = 0.5
    n = 16
    a = math.sqrt(0.5 * (n - 1) / n)
    pattern = np.where(np.indices((4, 4)).sum(axis=0) % 2 == 0, a, -a)
    bgp = np.where(np.indices((8, 8)).sum(axis=0) % 2 == 0, 1, -1) * math.sqrt(0.5 * 63 / 64)
    for x, y, w, h in _rois().signal:
        img[y:y + h, x:x + w] = 1.0 + pattern
    img[20:28, 20:28] = bgp
    assert cnr(img, _rois()) == pytest.approx(0.0, abs=1e-12)


def test_cnr_no_contrast_sentinel():
    img = np.full((30, 30), 0.5)
    r = _rois()
    for x, y, w, h in r.signal:
        img[y:y + h, x:x + w] += np.where(np.indices((h, w)).sum(axis=0) % 2 == 0, 0.25, -0.25)
    with pytest.warns(MetricWarning):
        assert cnr(img, r) == -math.inf


def test_roi_validation(tmp_path):
    with pytest.raises(RoiError):
        RoiSet([(0, 0, 1, 4)], (10, 10, 4, 4)).validate((20, 20))
    with pytest.raises(RoiError):
        RoiSet([(0, 0, 4, 4)], (18, 18, 4, 4)).validate((20, 20))
    with pytest.raises(RoiError):
        RoiSet([(0, 0, 6, 6)], (4, 4, 4, 4)).validate((20, 20))
    p = tmp_path / "r.json"
    p.write_text(json.dumps(_rois().to_dict()))
    assert RoiSet.load(p) == _rois()
    p.write_text(json.dumps({"signal": []}))
    with pytest.raises(RoiError):
        RoiSet.load(p)


def test_auto_rois_on_phantoms():
    from pamdenoise.noise import PhantomSpec, gen_phantom

    for s in range(10):
        clean = gen_phantom(PhantomSpec(seed=s))
        r = auto_rois(clean)
        r.validate(clean.shape)
        assert len(r.signal) == 4
        x, y, w, h = r.background
        assert clean[y:y + h, x:x + w].max() <= 0.02 * clean.max()
        for bx, by, bw, bh in r.signal:
            assert clean[by:by + bh, bx:bx + bw].mean() > 0.1
    with pytest.raises(RoiError):
        auto_rois(np.zeros((32, 32)))


# ---------------------------------------------------------------- evaluate


def _dataset(tmp_path, n_per_level=3):
    from pamdenoise.noise import LEVELS, PhantomSpec, gen_phantom, make_pair, sample_noise_spec

    rows = []
    for li, lv in enumerate(LEVELS):
        for k in range(n_per_level):
            seed = 10 * li + k
            clean = gen_phantom(PhantomSpec(seed=seed))
            noisy, _ = make_pair(clean, sample_noise_spec(lv, seed), seed)
            pio.write_pgm(tmp_path / f"c{seed}.pgm", clean)
            pio.write_pgm(tmp_path / f"n{seed}.pgm", noisy)
            rows.append({"clean_path": f"c{seed}.pgm", "noisy_path": f"n{seed}.pgm", "level": lv.value, "seed": seed})
    pio.dump_json(tmp_path / "m.json", rows)
    return tmp_path / "m.json"


def test_evaluate_identity_and_aggregates(tmp_path):
    m = _dataset(tmp_path)
    rep = evaluate(m)
    rows = pio.read_dataset_manifest(m)
    for row, rec in zip(rows, rep.rows):
        n, c = pio.read_pgm(row["noisy_path"]), pio.read_pgm(row["clean_path"])
        assert rec["psnr"] == psnr(n, c) and rec["ssim"] == ssim(n, c)
    vals = [r["psnr"] for r in rep.rows]
    agg = rep.aggregates["all"]["psnr"]
    assert abs(agg["mean"] - np.mean(vals)) < 1e-12
    assert abs(agg["std"] - np.std(vals, ddof=1)) < 1e-12
    assert rep.recompute() == rep.aggregates


def test_evaluate_grouped_ordering_and_table(tmp_path):
    rep = evaluate(_dataset(tmp_path, 4), rois="auto", group_by_level=True)
    assert list(rep.aggregates) == ["low", "mid", "high"]
    p = [rep.aggregates[g]["psnr"]["mean"] for g in ("low", "mid", "high")]
    assert p[0] > p[1] > p[2]
    table = rep.table().splitlines()
    assert len(table) == 4 and "SNR" in table[0]
    assert json.loads(json.dumps(rep.to_dict()))["metrics"] == ["psnr", "ssim", "snr", "cnr"]


def test_evaluate_with_model_and_predictions(tmp_path):
    m = _dataset(tmp_path, 1)
    rows = pio.read_dataset_manifest(m)
    clean = [pio.read_pgm(r["clean_path"]) for r in rows]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MetricWarning)
        rep = evaluate(m, predictions=clean)
    assert all(r["psnr"] == math.inf for r in rep.rows)
    assert rep.aggregates["all"]["psnr"]["n"] == 0
    rep2 = evaluate(m, model=lambda x: np.clip(x * 0.5, 0, 1))
    assert rep2.rows[0]["psnr"] != evaluate(m).rows[0]["psnr"]


def test_evaluate_usage_errors(tmp_path):
    pio.write_pgm(tmp_path / "n.pgm", np.zeros((16, 16)))
    rows = [{"noisy_path": str(tmp_path / "n.pgm"), "level": "low"}]
    with pytest.raises(metrics.UsageError):
        evaluate(rows)
    with pytest.raises(metrics.UsageError):
        evaluate(rows, rois="auto")
