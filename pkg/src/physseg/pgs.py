"""Physics Gold Standard labeler.

Tissue labels are derived directly from the quantitative maps: a diagonal
Gaussian mixture over (T1, T2*, PD) is fitted with EM on the masked
voxels, one component per tissue by default, initialised at literature
means so the component-to-tissue identity is fixed from the start (no
post-hoc relabeling). Because the labels depend only on the MPM they are
identical across every simulated contrast of a subject.

Features are z-scored per channel over the mask before EM (the raw
channels span four orders of magnitude) and the fitted parameters are
mapped back to original units afterwards.
"""

import json
from dataclasses import dataclass

import numpy as np

from .phantom import TissueParams
from .volumes import Grid3, HardSegmentation, SoftSegmentation, TISSUES

VARIANCE_FLOOR = 1e-6  # in standardized units
COLLAPSE_WEIGHT = 1e-6

_LOG2PI = float(np.log(2.0 * np.pi))


class PgsError(ValueError):
    pass


class PgsCollapseError(PgsError):
    """A mixture component lost essentially all its weight."""


@dataclass(frozen=True)
class TissueGmm:
    """Fitted diagonal GMM. Component k belongs to tissue ``tissue_of[k]``;
    with the default one component per tissue this is the identity map."""

    weights: np.ndarray       # (K,)
    means: np.ndarray         # (K, 3) in original units
    variances: np.ndarray     # (K, 3) in original units
    tissue_of: np.ndarray     # (K,) indices into TISSUES
    n_iter: int = 0
    final_ll: float = 0.0
    ll_trace: tuple = ()

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if abs(w.sum() - 1.0) > 1e-9 or (w <= 0).any() or (w >= 1).any():
            raise PgsError("component weights must lie in (0,1) and sum to 1")
        if (np.asarray(self.variances) <= 0).any():
            raise PgsError("component variances must be > 0")

    def to_json(self, path):
        payload = {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
            "tissue_of": [int(t) for t in self.tissue_of],
            "tissues": list(TISSUES),
            "n_iter": self.n_iter,
            "final_ll": self.final_ll,
            "ll_trace": list(self.ll_trace),
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, sort_keys=True, indent=1)
            fh.write("\n")

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            payload = json.load(fh)
        return cls(
            weights=np.array(payload["weights"]),
            means=np.array(payload["means"]),
            variances=np.array(payload["variances"]),
            tissue_of=np.array(payload["tissue_of"], dtype=np.int64),
            n_iter=int(payload["n_iter"]),
            final_ll=float(payload["final_ll"]),
            ll_trace=tuple(payload.get("ll_trace", ())),
        )


def _features(mpm):
    inside = mpm.mask_bool()
    if not inside.any():
        raise PgsError("mask is empty")
    x = np.stack([
        mpm.t1_ms.data[inside],
        mpm.t2s_ms.data[inside],
        mpm.pd.data[inside],
    ], axis=1).astype(np.float64)
    return x, inside


def _log_gauss_diag(x, mean, var):
    # x: (N, D), mean/var: (D,)
    d = x - mean
    return -0.5 * (np.log(var).sum() + (d * d / var).sum(axis=1) + x.shape[1] * _LOG2PI)


def _estep(x, weights, means, variances):
    K = weights.size
    logp = np.empty((x.shape[0], K))
    for k in range(K):
        logp[:, k] = np.log(weights[k]) + _log_gauss_diag(x, means[k], variances[k])
    m = logp.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logp - m).sum(axis=1))
    resp = np.exp(logp - lse[:, None])
    return resp, float(lse.sum())


def fit_gmm(mpm, init=None, max_iters=200, tol=1e-7, components_per_tissue=1):
    """EM fit of the tissue mixture on the masked quantitative values.

    The log-likelihood is non-decreasing across iterations; the fit stops
    when the relative improvement drops below ``tol`` or at ``max_iters``.
    A component whose weight falls below 1e-6 aborts the fit with a
    collapse error naming the component.
    """
    init = init if init is not None else TissueParams.default()
    x, _ = _features(mpm)
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd[sd == 0] = 1.0
    z = (x - mu) / sd

    n_t = len(TISSUES)
    K = n_t * components_per_tissue
    tissue_of = np.repeat(np.arange(n_t), components_per_tissue)
    means = np.empty((K, 3))
    variances = np.empty((K, 3))
    for k in range(K):
        t = tissue_of[k]
        offset = 0.0
        if components_per_tissue > 1:
            # Deterministic spread so sibling components start distinct.
            j = k - t * components_per_tissue
            offset = (j - (components_per_tissue - 1) / 2.0) * 0.5
        means[k] = (init.means[t] - mu) / sd + offset * np.maximum(init.stds[t] / sd, 0.1)
        variances[k] = np.maximum((init.stds[t] / sd) ** 2, VARIANCE_FLOOR)
    weights = np.full(K, 1.0 / K)

    ll_trace = []
    ll_prev = None
    for it in range(1, max_iters + 1):
        resp, ll = _estep(z, weights, means, variances)
        ll_trace.append(ll)
        nk = resp.sum(axis=0)
        frac = nk / z.shape[0]
        if (frac < COLLAPSE_WEIGHT).any():
            k = int(np.argmin(frac))
            raise PgsCollapseError(
                f"component {k} ({TISSUES[tissue_of[k]]}) collapsed "
                f"(weight {frac[k]:.2e} < {COLLAPSE_WEIGHT:g})"
            )
        weights = frac
        means = (resp.T @ z) / nk[:, None]
        for k in range(weights.size):
            d = z - means[k]
            variances[k] = np.maximum(
                (resp[:, k][:, None] * d * d).sum(axis=0) / nk[k], VARIANCE_FLOOR
            )
        if ll_prev is not None:
            if (ll - ll_prev) / abs(ll_prev) < tol:
                break
        ll_prev = ll

    return TissueGmm(
        weights=weights,
        means=means * sd + mu,
        variances=variances * sd ** 2,
        tissue_of=tissue_of,
        n_iter=len(ll_trace),
        final_ll=ll_trace[-1],
        ll_trace=tuple(ll_trace),
    )


def responsibilities(x, gmm):
    """Per-tissue posterior probabilities for feature rows (N, 3)."""
    K = gmm.weights.size
    logp = np.empty((x.shape[0], K))
    for k in range(K):
        logp[:, k] = np.log(gmm.weights[k]) + _log_gauss_diag(
            x, np.asarray(gmm.means[k], dtype=np.float64),
            np.asarray(gmm.variances[k], dtype=np.float64))
    m = logp.max(axis=1, keepdims=True)
    p = np.exp(logp - m)
    p /= p.sum(axis=1, keepdims=True)
    out = np.zeros((x.shape[0], len(TISSUES)))
    for k in range(K):
        out[:, gmm.tissue_of[k]] += p[:, k]
    return out


def label_pgs(mpm, gmm):
    """Posterior soft labels plus their argmax hard labels.

    Ties in the argmax break toward the lower tissue index (CSF < GM < WM).
    """
    x, inside = _features(mpm)
    post = responsibilities(x, gmm)
    probs = np.zeros((len(TISSUES),) + mpm.dims, dtype=np.float32)
    for t in range(len(TISSUES)):
        probs[t][inside] = post[:, t]
    soft = SoftSegmentation.from_probs(probs, mpm.mask)

    labels = np.zeros(mpm.dims, dtype=np.float32)
    labels[inside] = np.argmax(post, axis=1).astype(np.float32) + 1.0
    hard = HardSegmentation(Grid3(mpm.dims, mpm.spacing_mm, labels))
    return soft, hard
