"""Gradient-check suites for every differentiable operation in the package.

Each suite builds small random problems, runs central-difference checks in
float64, and returns one report per op. Random positions are kept away from
subgradient points (integer sampling lattice, clamp edges, abs at 0) except
where a boundary case is deliberately included with an exclusion mask.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import dpm
from . import predictors as pred
from .autodiff import gradcheck
from .errors import ContractError
from .objective import CMM_EPS, FeatureExtractorSpec, combined_loss, feature_loss, l1_loss
from .tensorio import Rng

SUITES = ("elementwise", "conv", "dpm", "cmm", "predictor")


def _mix(tape, node, gen):
    """Reduce a node to a scalar with a fixed random weighting."""
    c = tape.leaf(gen.normal(size=node.shape))
    return ad.sum_(ad.mul(node, c))


def _away_from(x, bad, min_dist=0.05):
    """Nudge values that sit within min_dist of any value in ``bad``."""
    x = np.array(x, dtype=np.float64)
    for b in bad:
        close = np.abs(x - b) < min_dist
        x[close] += 2 * min_dist
    return x


def suite_elementwise(seed: int = 0):
    root = Rng(seed, "gradsuite/elementwise")
    reports = []

    def check(name, fn, inputs, exclude=None):
        gen = root.stream(name).gen
        reports.append(gradcheck(fn, inputs, name=name, exclude=exclude, rng=gen))

    gen = root.stream("draws").gen
    x = gen.normal(size=(3, 4))
    y = gen.normal(size=(3, 4))
    s = gen.normal(size=(1,))

    check("add", lambda t, a, b: _mix(t, ad.add(a, b), np.random.default_rng(1)), [x, y])
    check("add_scalar_broadcast",
          lambda t, a, b: _mix(t, ad.add(a, b), np.random.default_rng(2)), [x, s])
    check("sub", lambda t, a, b: _mix(t, ad.sub(a, b), np.random.default_rng(3)), [x, y])
    check("mul", lambda t, a, b: _mix(t, ad.mul(a, b), np.random.default_rng(4)), [x, y])
    check("div", lambda t, a, b: _mix(t, ad.div(a, b), np.random.default_rng(5)),
          [x, _away_from(y, [0.0], 0.2)])
    check("smul", lambda t, a: _mix(t, ad.smul(a, 1.7), np.random.default_rng(6)), [x])
    check("abs", lambda t, a: _mix(t, ad.abs_(a), np.random.default_rng(7)),
          [_away_from(x, [0.0])])
    check("tanh", lambda t, a: _mix(t, ad.tanh(a), np.random.default_rng(8)), [x])
    check("relu", lambda t, a: _mix(t, ad.relu(a), np.random.default_rng(9)),
          [_away_from(x, [0.0])])
    check("exp", lambda t, a: _mix(t, ad.exp(a), np.random.default_rng(10)), [x])
    check("sigmoid", lambda t, a: _mix(t, ad.sigmoid(a), np.random.default_rng(11)), [x])
    check("softplus", lambda t, a: _mix(t, ad.softplus(a), np.random.default_rng(12)), [x])

    # clamp: interior elements checked, one element pinned exactly at the lower
    # boundary and excluded as a known subgradient point
    xc = _away_from(gen.normal(size=(6,)), [-1.0, 1.0], 0.1)
    xc[2] = -1.0
    mask = np.zeros(6, dtype=bool)
    mask[2] = True
    check("clamp", lambda t, a: _mix(t, ad.clamp(a, -1.0, 1.0), np.random.default_rng(13)),
          [xc], exclude=[mask])
    check("maximum_s",
          lambda t, a: _mix(t, ad.maximum_s(a, 0.1), np.random.default_rng(14)),
          [_away_from(gen.normal(size=(5,)), [0.1], 0.1)])

    check("mean", lambda t, a: ad.mean_(a), [x])
    check("sum", lambda t, a: ad.sum_(a), [x])
    check("pool_mean_axis",
          lambda t, a: _mix(t, ad.pool_mean_axis(a, 0), np.random.default_rng(15)), [x])
    # distinct values keep the argmax stable under the probe step
    xm = gen.permutation(12).reshape(3, 4).astype(np.float64)
    check("pool_max_axis",
          lambda t, a: _mix(t, ad.pool_max_axis(a, 0), np.random.default_rng(16)), [xm])
    check("upsample_linear_1d",
          lambda t, a: _mix(t, ad.upsample_linear_1d(a, 2), np.random.default_rng(17)),
          [gen.normal(size=(3, 5))])
    check("avg_downsample2d",
          lambda t, a: _mix(t, ad.avg_downsample2d(a, 2, 2), np.random.default_rng(18)),
          [gen.normal(size=(4, 6))])
    check("bias_add",
          lambda t, a, b: _mix(t, ad.bias_add(a, b), np.random.default_rng(19)),
          [gen.normal(size=(2, 3, 4)), gen.normal(size=(2,))])
    return reports


def suite_conv(seed: int = 0):
    gen = Rng(seed, "gradsuite/conv").gen
    reports = []
    x = gen.normal(size=(1, 4, 5))
    k = gen.normal(size=(2, 1, 3, 3))
    reports.append(gradcheck(
        lambda t, a, b: _mix(t, ad.conv2d(a, b), np.random.default_rng(20)),
        [x, k], name="conv2d"))
    x2 = gen.normal(size=(2, 6, 6))
    k2 = gen.normal(size=(3, 2, 2, 2))
    reports.append(gradcheck(
        lambda t, a, b: _mix(t, ad.conv2d(a, b, stride=(2, 2), pad=(1, 1)),
                             np.random.default_rng(21)),
        [x2, k2], name="conv2d_stride_pad"))
    return reports


def _interior_grid(gen, m, w_img, h_img, w_cols):
    """Normalized grid positions with fractional parts well inside pixel cells."""
    u = gen.integers(0, w_img - 1, size=(m, w_cols)) + gen.uniform(0.25, 0.75, size=(m, w_cols))
    v = gen.integers(0, h_img - 1, size=(m, w_cols)) + gen.uniform(0.25, 0.75, size=(m, w_cols))
    g = np.empty((m, w_cols, 2))
    g[:, :, 0] = 2.0 * u / (w_img - 1) - 1.0
    g[:, :, 1] = 2.0 * v / (h_img - 1) - 1.0
    return g


def suite_dpm(seed: int = 0):
    root = Rng(seed, "gradsuite/dpm")
    gen = root.gen
    reports = []

    up = gen.uniform(-0.7, -0.2, size=7)
    lo = gen.uniform(0.2, 0.7, size=7)
    reports.append(gradcheck(
        lambda t, a, b: _mix(t, dpm.build_sampling_grid(a, b, 5), np.random.default_rng(30)),
        [up, lo], name="build_sampling_grid"))

    img = gen.normal(size=(6, 5))
    grid = _interior_grid(gen, 4, 5, 6, 5)
    reports.append(gradcheck(
        lambda t, a, b: _mix(t, dpm.bilinear_sample(a, b), np.random.default_rng(31)),
        [img, grid], name="bilinear_sample"))

    slice_img = gen.uniform(0.0, 1.0, size=(12, 9))
    upc = gen.uniform(-0.6, -0.2, size=9)
    loc = gen.uniform(0.1, 0.6, size=9)
    for mode in ("mean", "max"):
        reports.append(gradcheck(
            lambda t, a, b, c, m=mode: _mix(
                t, dpm.project_column(a, b, c, 8, m), np.random.default_rng(32)),
            [slice_img, upc, loc], name=f"project_column_{mode}"))

    raw = gen.normal(size=(3, 6))
    reports.append(gradcheck(
        lambda t, a: _mix(t, dpm.monotone_reparam(a), np.random.default_rng(33)),
        [raw], name="monotone_reparam"))

    # full chain: raw coords -> reparam -> grid -> sample -> pool -> scalar
    def chain(t, a):
        curves = dpm.monotone_reparam(a)
        col = dpm.project_column(t.leaf(slice_img), ad.take_row(curves, 0),
                                 ad.take_row(curves, 1), 8, "mean")
        return _mix(t, col, np.random.default_rng(34))

    reports.append(gradcheck(chain, [gen.normal(size=(3, 9))], name="reparam_project_chain"))
    return reports


def suite_cmm(seed: int = 0):
    gen = Rng(seed, "gradsuite/cmm").gen
    reports = []

    def cmm_fn(t, p, mm):
        imin = ad.take_scalar(mm, 0)
        imax = ad.take_scalar(mm, 1)
        denom = ad.maximum_s(ad.sub(imax, imin), CMM_EPS)
        out = ad.div(ad.sub(p, imin), denom)
        return _mix(t, out, np.random.default_rng(40))

    p = gen.uniform(0.0, 1.0, size=9)
    mm = np.array([0.12, 0.87])  # span far from the epsilon floor
    reports.append(gradcheck(cmm_fn, [p, mm], name="cmm_apply"))

    a = gen.uniform(0.0, 1.0, size=(8, 8))
    b = gen.uniform(0.0, 1.0, size=(8, 8))
    reports.append(gradcheck(lambda t, u: l1_loss(u, b), [a], name="l1_loss"))

    spec = FeatureExtractorSpec(seed=seed)
    af = gen.uniform(0.0, 1.0, size=(10, 12))
    bf = gen.uniform(0.0, 1.0, size=(10, 12))
    reports.append(gradcheck(lambda t, u: feature_loss(u, bf, spec), [af],
                             name="feature_loss"))

    g2 = gen.uniform(0.0, 1.0, size=(6, 8))
    g3 = gen.uniform(0.0, 1.0, size=(6, 8))
    reports.append(gradcheck(
        lambda t, u, v: combined_loss(u, g2, v, g3, lam=0.2, feature_spec=spec),
        [gen.uniform(0.0, 1.0, size=(6, 8)), gen.uniform(0.0, 1.0, size=(6, 8))],
        name="combined_loss"))
    return reports


def suite_predictor(seed: int = 0):
    rng = Rng(seed, "gradsuite/predictor")
    gen = rng.gen
    cfg = pred.ColumnPredictorConfig(channels=(4, 4))
    h = w = 16
    params = pred.init_conv_params(cfg, h, w, rng.stream("init"))
    names = sorted(params)
    slice_img = gen.uniform(0.0, 1.0, size=(h, w))
    target2 = gen.uniform(0.0, 1.0, size=w)
    target3 = gen.uniform(0.0, 1.0, size=w)

    def loss_fn(t, *arrays):
        weights = {n: node for n, node in zip(names, arrays)}
        curves = pred.predict_curves(weights, t.leaf(slice_img), cfg)
        col2 = dpm.project_column(t.leaf(slice_img), ad.take_row(curves, 0),
                                  ad.take_row(curves, 1), 8, "mean")
        col3 = dpm.project_column(t.leaf(slice_img), ad.take_row(curves, 1),
                                  ad.take_row(curves, 2), 8, "mean")
        return ad.add(l1_loss(col2, target2), ad.smul(l1_loss(col3, target3), 0.2))

    # a handful of randomly chosen weights per tensor keeps this fast
    report = gradcheck(loss_fn, [params[n] for n in names], name="predictor_loss_to_weights",
                       sample=3, rng=rng.stream("sample").gen)
    return [report]


def run_suites(which: str = "all", seed: int = 0):
    """Run the requested suites; returns a flat list of reports."""
    table = {
        "elementwise": (suite_elementwise,),
        "conv": (suite_conv,),
        "dpm": (suite_dpm,),
        "cmm": (suite_cmm,),
        "predictor": (suite_predictor,),
    }
    if which == "all":
        picked = [fn for fns in table.values() for fn in fns]
    elif which in table:
        picked = list(table[which])
    else:
        raise ContractError(f"unknown suite {which!r}; expected all or one of {SUITES}")
    reports = []
    for fn in picked:
        reports.extend(fn(seed))
    return reports
