"""Physics-conditioned voxelwise MLP segmenter.

The segmenter maps, per voxel, a 3x3x3 neighborhood of image intensities
(27 features) to tissue logits. Acquisition parameters are encoded as a
fixed 7-slot vector, pushed through a two-layer embedding, and
concatenated both to the input features and to the penultimate layer, so
physics information reaches the early and the late features. A sigma head
with a softplus output models heteroscedastic label noise via attenuated
cross-entropy, and unit-level dropout gives Monte Carlo epistemic
sampling. All arithmetic is float64 numpy; gradients are hand-derived and
verified against finite differences in the test suite.

Dropout granularity differs between training and Monte Carlo inference.
Training draws an independent mask per voxel and unit (the usual
low-variance regulariser). Epistemic sampling at inference instead drops
whole hidden units, one mask shared by every voxel of a sample: each
Monte Carlo draw is then a coherent subnet, so its segmentation errs
consistently across space and volume-level uncertainty does not average
away over the hundred-thousand voxels of a grid.
"""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .simulate import (AugmentConfig, Mprage, ParamRange, Spgr, make_batch,
                       pregenerated_params, simulate_volume)
from .volumes import MpmVolume, SoftSegmentation, TISSUES

N_NEIGHBORS = 27
SIGMA_FLOOR = 1e-12

#: Sequence parameter encoding: two indicator slots then the raw
#: parameters; unused slots stay zero. Values are scaled to about [0, 1]
#: by the widest ranges the studies explore.
PARAM_SCHEMA = ("is_mprage", "is_spgr", "ti_ms", "ptd_ms", "tr_ms", "te_ms", "fa_deg")
PARAM_SCALE = (1.0, 1.0, 2000.0, 2000.0, 200.0, 20.0, 90.0)


class ModelError(ValueError):
    pass


class TrainDiverged(ModelError):
    def __init__(self, epoch, step):
        super().__init__(f"loss became non-finite at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step


def encode_params(params):
    """Encode SequenceParams into the fixed 7-slot schema."""
    v = np.zeros(len(PARAM_SCHEMA), dtype=np.float64)
    if isinstance(params, Mprage):
        v[0] = 1.0
        v[2] = params.ti_ms
        v[3] = params.ptd_ms
    elif isinstance(params, Spgr):
        v[1] = 1.0
        v[4] = params.tr_ms
        v[5] = params.te_ms
        v[6] = params.fa_deg
    else:
        raise ModelError(f"cannot encode {type(params).__name__}")
    return v / np.asarray(PARAM_SCALE)


# ---------------------------------------------------------------------------
# Configuration and weights
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MlpConfig:
    hidden_widths: tuple = (64, 64, 48)
    embed_widths: tuple = (40, 40)
    dropout_first: float = 0.05
    dropout_rest: float = 0.5
    heteroscedastic: bool = True
    t_samples: int = 10          # noise draws for the attenuated loss
    lambda_strat: float = 0.1
    intensity_scale: float = 1.0  # 1 / (gain * max tissue PD)
    n_classes: int = len(TISSUES)

    def __post_init__(self):
        if any(w < 1 for w in self.hidden_widths) or len(self.hidden_widths) < 1:
            raise ModelError("hidden widths must be >= 1")
        if len(self.embed_widths) != 2:
            raise ModelError("the physics embedding has exactly two layers")
        for p in (self.dropout_first, self.dropout_rest):
            if not (0.0 <= p < 1.0):
                raise ModelError("dropout rates must lie in [0, 1)")
        if self.t_samples < 1:
            raise ModelError("t_samples must be >= 1")

    @property
    def input_width(self):
        return N_NEIGHBORS + self.embed_widths[1]

    @property
    def penultimate_width(self):
        return self.hidden_widths[-1]

    @property
    def readout_width(self):
        return self.hidden_widths[-1] + self.embed_widths[1]

    def dropout_rates(self):
        return [self.dropout_first] + [self.dropout_rest] * (len(self.hidden_widths) - 1)


def _param_spec(cfg):
    """Ordered (name, shape) list defining flatten order and the payload."""
    spec = [
        ("embed.W0", (len(PARAM_SCHEMA), cfg.embed_widths[0])),
        ("embed.b0", (cfg.embed_widths[0],)),
        ("embed.W1", (cfg.embed_widths[0], cfg.embed_widths[1])),
        ("embed.b1", (cfg.embed_widths[1],)),
    ]
    prev = cfg.input_width
    for i, w in enumerate(cfg.hidden_widths):
        spec.append((f"trunk.W{i}", (prev, w)))
        spec.append((f"trunk.b{i}", (w,)))
        prev = w
    spec.append(("head.W", (cfg.readout_width, cfg.n_classes)))
    spec.append(("head.b", (cfg.n_classes,)))
    spec.append(("sigma.W", (cfg.readout_width, 1)))
    spec.append(("sigma.b", (1,)))
    return spec


@dataclass
class ModelWeights:
    config: MlpConfig
    conditioned: bool
    params: dict

    @classmethod
    def init(cls, config, rng, conditioned=True):
        params = {}
        for name, shape in _param_spec(config):
            if name.split(".")[-1].startswith("b"):
                params[name] = np.zeros(shape)
            else:
                fan_in = shape[0]
                params[name] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        # Start the predicted sigma small so early training is close to
        # plain cross-entropy.
        params["sigma.b"] = np.full((1,), -2.0)
        return cls(config=config, conditioned=conditioned, params=params)

    def copy(self):
        return ModelWeights(self.config, self.conditioned,
                            {k: v.copy() for k, v in self.params.items()})

    def zeros_like(self):
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def flatten(self):
        return np.concatenate([self.params[n].ravel() for n, _ in _param_spec(self.config)])

    def unflatten(self, flat):
        out = {}
        pos = 0
        for name, shape in _param_spec(self.config):
            n = int(np.prod(shape))
            out[name] = np.asarray(flat[pos:pos + n], dtype=np.float64).reshape(shape)
            pos += n
        return ModelWeights(self.config, self.conditioned, out)

    def checksum(self):
        payload = b"".join(
            np.ascontiguousarray(self.params[n], dtype="<f8").tobytes()
            for n, _ in _param_spec(self.config)
        )
        return hashlib.sha256(payload).hexdigest()


# ---------------------------------------------------------------------------
# Featurization
# ---------------------------------------------------------------------------

def _neighbor_offsets():
    # Canonical order: x fastest, then y, then z; the centre voxel is
    # at position 13.
    return [(dx, dy, dz)
            for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]


_OFFSETS = _neighbor_offsets()


def featurize(patch, voxel_index):
    """27-vector of neighborhood intensities at ``voxel_index``.

    The full 3x3x3 neighborhood must lie inside the patch, i.e. the voxel
    must keep a one-voxel margin.
    """
    ix, iy, iz = (int(i) for i in voxel_index)
    nx, ny, nz = patch.dims
    if not (1 <= ix <= nx - 2 and 1 <= iy <= ny - 2 and 1 <= iz <= nz - 2):
        raise ModelError(
            f"voxel {voxel_index} violates the one-voxel margin of dims {patch.dims}"
        )
    d = patch.data
    return np.array([d[ix + ox, iy + oy, iz + oz] for ox, oy, oz in _OFFSETS],
                    dtype=np.float64)


def neighborhood_features(data, ix, iy, iz):
    """Vectorized featurize for interior index arrays; returns (N, 27)."""
    out = np.empty((ix.size, N_NEIGHBORS), dtype=np.float64)
    for n, (ox, oy, oz) in enumerate(_OFFSETS):
        out[:, n] = data[ix + ox, iy + oy, iz + oz]
    return out


def interior_mask_indices(mask_data):
    """Indices of masked voxels with a one-voxel margin to the array edge."""
    interior = np.zeros(mask_data.shape, dtype=bool)
    interior[1:-1, 1:-1, 1:-1] = True
    sel = (mask_data > 0) & interior
    return np.nonzero(sel)


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

def softplus(x):
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def draw_dropout_masks(cfg, rng, n_voxels=None):
    """Inverted-dropout masks per hidden layer.

    With ``n_voxels`` the masks are per voxel and unit (training); without
    it one unit mask is shared across all voxels (Monte Carlo subnets).
    """
    masks = []
    for rate, width in zip(cfg.dropout_rates(), cfg.hidden_widths):
        keep = 1.0 - rate
        shape = width if n_voxels is None else (n_voxels, width)
        if rate == 0.0:
            masks.append(np.ones(shape))
        else:
            masks.append((rng.random(shape) < keep).astype(np.float64) / keep)
    return masks


def _embed_forward(weights, pvec):
    p = weights.params
    a_e = pvec @ p["embed.W0"] + p["embed.b0"]
    h_e = np.maximum(a_e, 0.0)
    emb = h_e @ p["embed.W1"] + p["embed.b1"]
    return emb, (a_e, h_e)


def forward(weights, feats, params_vec, dropout_masks=None):
    """Run the network on (V, 27) features under one parameter vector.

    Returns (logits (V, C), sigma (V,) or None, penultimate (V, W), cache).
    With ``dropout_masks`` None the pass is deterministic. Unconditioned
    models receive a zero embedding regardless of ``params_vec``.
    """
    cfg = weights.config
    p = weights.params
    V = feats.shape[0]

    if weights.conditioned:
        emb, emb_cache = _embed_forward(weights, params_vec)
    else:
        emb, emb_cache = np.zeros(cfg.embed_widths[1]), None

    x = np.concatenate([feats, np.broadcast_to(emb, (V, emb.size))], axis=1)
    masks = dropout_masks
    if masks is None:
        masks = [np.ones(w) for w in cfg.hidden_widths]

    acts = []      # (a_i, h_i, h_i_dropped) per hidden layer
    h_prev = x
    for i in range(len(cfg.hidden_widths)):
        a = h_prev @ p[f"trunk.W{i}"] + p[f"trunk.b{i}"]
        h = np.maximum(a, 0.0)
        hd = h * masks[i]
        acts.append((a, h, hd))
        h_prev = hd
    penult = acts[-1][1]  # pre-dropout, used by the stratification loss

    z = np.concatenate([acts[-1][2], np.broadcast_to(emb, (V, emb.size))], axis=1)
    logits = z @ p["head.W"] + p["head.b"]

    sigma = None
    s_raw = None
    if cfg.heteroscedastic:
        s_raw = (z @ p["sigma.W"] + p["sigma.b"])[:, 0]
        sigma = np.maximum(softplus(s_raw), SIGMA_FLOOR)

    for name, arr in (("logits", logits), ("sigma", sigma)):
        if arr is not None and not np.isfinite(arr).all():
            raise ModelError(f"non-finite activation in {name}")

    cache = {"x": x, "acts": acts, "z": z, "emb": emb, "emb_cache": emb_cache,
             "masks": masks, "s_raw": s_raw, "pvec": params_vec}
    return logits, sigma, penult, cache


def _softmax(logits):
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def loss_heteroscedastic(logits, sigma, labels, noise):
    """Attenuated cross-entropy and its gradients.

    ``noise`` holds fixed standard-normal draws of shape (T, V, C); each
    draw perturbs the logits by sigma * eps before the per-draw
    cross-entropy, and the draws combine as -log(mean_t exp(-ce_t)).
    Returns (mean loss, dlogits (V, C), dsigma (V,)).
    """
    T = noise.shape[0]
    V = logits.shape[0]
    x = logits[None, :, :] + sigma[None, :, None] * noise      # (T, V, C)
    m = x.max(axis=2, keepdims=True)
    lse = m[:, :, 0] + np.log(np.exp(x - m).sum(axis=2))        # (T, V)
    picked = np.take_along_axis(x, labels[None, :, None].repeat(T, 0), axis=2)[:, :, 0]
    ce = lse - picked                                           # (T, V)

    a = -ce
    am = a.max(axis=0, keepdims=True)
    lme = am[0] + np.log(np.exp(a - am).mean(axis=0))           # log mean_t exp(-ce)
    loss = float(-lme.mean())

    w = np.exp(a - am)
    w /= w.sum(axis=0, keepdims=True)                           # (T, V)
    soft = np.exp(x - m) / np.exp(x - m).sum(axis=2, keepdims=True)
    soft[np.arange(T)[:, None], np.arange(V)[None, :], labels[None, :].repeat(T, 0)] -= 1.0
    g = w[:, :, None] * soft                                    # dL/dx per draw
    dlogits = g.sum(axis=0) / V
    dsigma = (g * noise).sum(axis=(0, 2)) / V
    return loss, dlogits, dsigma


def loss_cross_entropy(logits, labels):
    """Plain softmax cross-entropy; returns (mean loss, dlogits)."""
    V = logits.shape[0]
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    picked = logits[np.arange(V), labels]
    loss = float((lse - picked).mean())
    d = _softmax(logits)
    d[np.arange(V), labels] -= 1.0
    return loss, d / V


def loss_stratification(penultimates):
    """Mean squared deviation of each sample's penultimate map from the
    batch mean (per-element mean convention); zero iff all maps are equal.

    Returns (loss, list of gradients w.r.t. each penultimate map).
    Batches with fewer than two samples are defined to have zero loss.
    """
    n = len(penultimates)
    if n < 2:
        return 0.0, [np.zeros_like(h) for h in penultimates]
    stack = np.stack(penultimates, axis=0)
    if (stack == stack[0]).all():
        # exactly zero for exactly equal maps (the mean of n equal floats
        # is not bitwise exact in general)
        return 0.0, [np.zeros_like(h) for h in penultimates]
    mean = stack.mean(axis=0)
    dev = stack - mean
    denom = dev[0].size * n
    loss = float((dev ** 2).sum() / denom)
    grads = [2.0 * dev[i] / denom for i in range(n)]
    return loss, grads


def total_loss(seg_loss, strat_loss, lambda_strat):
    return seg_loss + lambda_strat * strat_loss


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def _backward_sample(weights, cache, dlogits, dsigma, dpenult, grads):
    """Accumulate parameter gradients for one sample into ``grads``."""
    cfg = weights.config
    p = weights.params
    z = cache["z"]
    acts = cache["acts"]
    masks = cache["masks"]
    w_pen = cfg.penultimate_width

    dz = dlogits @ p["head.W"].T
    grads["head.W"] += z.T @ dlogits
    grads["head.b"] += dlogits.sum(axis=0)

    if cfg.heteroscedastic and dsigma is not None:
        s_raw = cache["s_raw"]
        sp = softplus(s_raw)
        dsraw = dsigma * np.where(sp > SIGMA_FLOOR, 1.0 / (1.0 + np.exp(-s_raw)), 0.0)
        dz += dsraw[:, None] * p["sigma.W"][:, 0][None, :]
        grads["sigma.W"] += z.T @ dsraw[:, None]
        grads["sigma.b"] += np.array([dsraw.sum()])

    demb = dz[:, w_pen:].sum(axis=0)
    dh_dropped = dz[:, :w_pen]

    dh = dh_dropped * masks[-1] + dpenult
    for i in range(len(cfg.hidden_widths) - 1, -1, -1):
        a, _, _ = acts[i]
        da = dh * (a > 0)
        h_below = cache["x"] if i == 0 else acts[i - 1][2]
        grads[f"trunk.W{i}"] += h_below.T @ da
        grads[f"trunk.b{i}"] += da.sum(axis=0)
        dh_below = da @ p[f"trunk.W{i}"].T
        if i == 0:
            demb += dh_below[:, N_NEIGHBORS:].sum(axis=0)
        else:
            dh = dh_below * masks[i - 1]

    if weights.conditioned:
        a_e, h_e = cache["emb_cache"]
        grads["embed.b1"] += demb
        grads["embed.W1"] += np.outer(h_e, demb)
        dh_e = p["embed.W1"] @ demb
        da_e = dh_e * (a_e > 0)
        grads["embed.b0"] += da_e
        grads["embed.W0"] += np.outer(cache["pvec"], da_e)


@dataclass
class BatchTerms:
    seg_loss: float
    strat_loss: float
    total: float


def forward_backward(weights, feats_list, pvecs, labels, cfg_train,
                     dropout_masks_list=None, noise_list=None):
    """Loss and gradients for one single-subject batch.

    ``feats_list`` holds per-sample (V, 27) features over a shared voxel
    set, ``labels`` the shared (V,) tissue indices. Dropout masks and
    attenuation noise are passed in explicitly so the loss is a
    deterministic function of the weights (which is what the finite
    difference check needs).
    """
    cfg = weights.config
    n = len(feats_list)
    caches = []
    penults = []
    logits_all = []
    sigma_all = []
    for s in range(n):
        masks = dropout_masks_list[s] if dropout_masks_list else None
        logits, sigma, penult, cache = forward(weights, feats_list[s], pvecs[s], masks)
        caches.append(cache)
        penults.append(penult)
        logits_all.append(logits)
        sigma_all.append(sigma)

    lam = cfg.lambda_strat if cfg_train.stratified else 0.0
    strat, dpenults = loss_stratification(penults) if lam > 0 else (0.0, None)

    grads = weights.zeros_like()
    seg_total = 0.0
    for s in range(n):
        if cfg.heteroscedastic:
            seg, dlogits, dsigma = loss_heteroscedastic(
                logits_all[s], sigma_all[s], labels, noise_list[s])
        else:
            seg, dlogits = loss_cross_entropy(logits_all[s], labels)
            dsigma = None
        seg_total += seg / n
        dlogits = dlogits / n
        if dsigma is not None:
            dsigma = dsigma / n
        dpen = (lam * dpenults[s]) if dpenults is not None else np.zeros_like(penults[s])
        _backward_sample(weights, caches[s], dlogits, dsigma, dpen, grads)

    terms = BatchTerms(seg_loss=seg_total, strat_loss=strat,
                       total=total_loss(seg_total, strat, lam))
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise ModelError(f"non-finite gradient in {name}")
    return terms, grads


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModeSpec:
    conditioned: bool
    stratified: bool
    augmented: bool
    param_source: str  # "pool" | "range" | "single"


MODES = {
    "baseline":       ModeSpec(False, False, False, "pool"),
    "phys":           ModeSpec(True,  False, False, "pool"),
    "phys_strat":     ModeSpec(True,  True,  False, "pool"),
    "phys_strat_aug": ModeSpec(True,  True,  True,  "range"),
    "phys_aug_base":  ModeSpec(False, True,  True,  "range"),
    "cnn_baseline":   ModeSpec(False, False, False, "single"),
}


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "phys_strat_aug"
    batch_size: int = 4
    patch_size: tuple = (24, 24, 24)
    steps_per_epoch: int = 100
    max_epochs: int = 50
    lr: float = 1e-2
    momentum: float = 0.9
    seed: int = 0
    patience: int = 7
    train_range: ParamRange = field(default_factory=ParamRange.mprage_in)
    val_range: ParamRange = field(default_factory=ParamRange.mprage_in)
    n_pregen: int = 11
    n_val_realizations: int = 5
    fixed_params: object = None            # for the single-contrast mode
    aug: AugmentConfig = field(default_factory=AugmentConfig.enabled)
    mlp: MlpConfig = field(default_factory=MlpConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ModelError(f"unknown mode {self.mode!r}; choose from {sorted(MODES)}")
        if self.patience < 1:
            raise ModelError("patience must be >= 1")

    @property
    def mode_spec(self):
        return MODES[self.mode]

    @property
    def stratified(self):
        return self.mode_spec.stratified


class EarlyStopper:
    """Keeps the best validation metric; stops after ``patience`` epochs
    without improvement."""

    def __init__(self, patience):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = -1

    def update(self, metric, epoch):
        if metric > self.best:
            self.best = metric
            self.best_epoch = epoch
            return True
        return False

    def should_stop(self, epoch):
        return epoch - self.best_epoch >= self.patience


def _prepare_batch_arrays(batch, intensity_scale):
    """Shared voxel set + per-sample features for one make_batch output."""
    mask = batch[0].labels.mask.data
    ix, iy, iz = interior_mask_indices(mask)
    if ix.size == 0:
        return None
    hard = batch[0].labels.harden().as_int()
    labels = hard[ix, iy, iz] - 1
    feats = [
        neighborhood_features(s.image.data.astype(np.float64) * intensity_scale,
                              ix, iy, iz)
        for s in batch
    ]
    return feats, labels


def _make_param_pool(cfg, rng):
    spec = cfg.mode_spec
    if spec.param_source == "single":
        fixed = cfg.fixed_params or Mprage(ti_ms=900.0, ptd_ms=800.0)
        return [fixed]
    if spec.param_source == "pool":
        return pregenerated_params(cfg.train_range, cfg.n_pregen,
                                   rng=np.random.default_rng([cfg.seed, 2090]))
    return None  # continuous sampling


def validation_metric(weights, val_subjects, val_params):
    """Mean over tissues of (dice + (1 - CoV)) over the validation set.

    Dice is against the hardened reference labels, averaged over subjects
    and realizations; CoV is across each subject's realizations, averaged
    over subjects.
    """
    from .harmonize import cov, dice as dice_fn
    per_tissue_dice = np.zeros(len(TISSUES))
    per_tissue_cov = np.zeros(len(TISSUES))
    for mpm, soft_ref in val_subjects:
        ref_hard = soft_ref.harden()
        vols = {t: [] for t in TISSUES}
        dices = {t: [] for t in TISSUES}
        for params in val_params:
            pred = predict(weights, mpm, params)[0].harden()
            for t in TISSUES:
                vols[t].append(pred.volume_ml(t))
                dices[t].append(dice_fn(pred, ref_hard, t))
        for t_i, t in enumerate(TISSUES):
            per_tissue_dice[t_i] += np.mean(dices[t]) / len(val_subjects)
            v = vols[t]
            c = cov(v) if (len(v) >= 2 and np.mean(v) > 0) else 1.0
            per_tissue_cov[t_i] += c / len(val_subjects)
    metric = float(np.mean(per_tissue_dice + (1.0 - per_tissue_cov)))
    return metric, per_tissue_dice, per_tissue_cov


def train(config, train_subjects, val_subjects):
    """Train one segmenter; returns (best ModelWeights, log rows).

    ``train_subjects`` and ``val_subjects`` are lists of
    (MpmVolume, SoftSegmentation) pairs; labels travel with their subject
    because batches are single-subject. Deterministic for a fixed seed.
    """
    if not train_subjects or not val_subjects:
        raise ModelError("need at least one training and one validation subject")
    spec = config.mode_spec
    rng = np.random.default_rng([config.seed, 11])
    weights = ModelWeights.init(config.mlp, rng, conditioned=spec.conditioned)
    velocity = weights.zeros_like()
    pool = _make_param_pool(config, rng)
    aug = config.aug if spec.augmented else AugmentConfig()

    if config.val_range.kind == "mprage":
        val_params = pregenerated_params(config.val_range, config.n_val_realizations)
    else:
        val_params = pregenerated_params(config.val_range, config.n_val_realizations,
                                         rng=np.random.default_rng([config.seed, 2091]))

    stopper = EarlyStopper(config.patience)
    best_weights = weights.copy()
    log = []
    T = config.mlp.t_samples
    n_classes = config.mlp.n_classes

    for epoch in range(config.max_epochs):
        seg_sum = strat_sum = total_sum = 0.0
        for step in range(config.steps_per_epoch):
            mpm, labels = train_subjects[int(rng.integers(0, len(train_subjects)))]
            batch = make_batch(
                mpm, labels, config.batch_size, config.patch_size,
                config.train_range, aug=aug, rng=rng, param_pool=pool,
            )
            prepped = _prepare_batch_arrays(batch, config.mlp.intensity_scale)
            if prepped is None:
                continue
            feats_list, label_idx = prepped
            pvecs = [encode_params(s.params) for s in batch]
            masks_list = [draw_dropout_masks(config.mlp, rng, n_voxels=label_idx.size)
                          for _ in batch]
            noise_list = None
            if config.mlp.heteroscedastic:
                noise_list = [
                    rng.standard_normal((T, label_idx.size, n_classes))
                    for _ in batch
                ]
            terms, grads = forward_backward(
                weights, feats_list, pvecs, label_idx, config,
                dropout_masks_list=masks_list, noise_list=noise_list,
            )
            if not np.isfinite(terms.total):
                raise TrainDiverged(epoch, step)
            for name in weights.params:
                velocity[name] = config.momentum * velocity[name] - config.lr * grads[name]
                weights.params[name] = weights.params[name] + velocity[name]
            seg_sum += terms.seg_loss
            strat_sum += terms.strat_loss
            total_sum += terms.total

        metric, vdice, vcov = validation_metric(weights, val_subjects, val_params)
        improved = stopper.update(metric, epoch)
        if improved:
            best_weights = weights.copy()
        row = {
            "epoch": epoch,
            "seg_loss": seg_sum / config.steps_per_epoch,
            "strat_loss": strat_sum / config.steps_per_epoch,
            "total_loss": total_sum / config.steps_per_epoch,
            "metric": metric,
            "improved": int(improved),
        }
        for t_i, t in enumerate(TISSUES):
            row[f"val_dice_{t}"] = float(vdice[t_i])
            row[f"val_cov_{t}"] = float(vcov[t_i])
        log.append(row)
        if stopper.should_stop(epoch):
            break

    return best_weights, log


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

def predict(weights, volume, params, mask=None, n_samples=None, dropout=False,
            hetero_noise=False, rng=None):
    """Segment a volume; returns a list of SoftSegmentations.

    ``volume`` is either an MpmVolume (simulated internally under
    ``params``) or an already simulated Grid3 image, in which case ``mask``
    is required. With dropout off the output is one deterministic
    segmentation. Monte Carlo sampling uses ``dropout=True`` (epistemic
    subnets) or ``hetero_noise=True`` (logits perturbed by the predicted
    per-voxel sigma, dropout off); ``n_samples`` then defaults to 50.
    """
    if n_samples is None:
        n_samples = 50 if (dropout or hetero_noise) else 1
    if isinstance(volume, MpmVolume):
        image = simulate_volume(volume, params)
        mask = volume.mask
    else:
        image = volume
        if mask is None:
            raise ModelError("mask is required when passing a simulated image")
    if hetero_noise and not weights.config.heteroscedastic:
        raise ModelError("model has no sigma head for heteroscedastic sampling")
    if (dropout or hetero_noise) and rng is None:
        rng = np.random.default_rng()

    cfg = weights.config
    padded = np.zeros(tuple(d + 2 for d in image.dims), dtype=np.float64)
    padded[1:-1, 1:-1, 1:-1] = image.data.astype(np.float64) * cfg.intensity_scale
    inside = mask.data > 0
    ix, iy, iz = np.nonzero(inside)
    feats = neighborhood_features(padded, ix + 1, iy + 1, iz + 1)
    pvec = encode_params(params)

    out = []
    for _ in range(max(1, int(n_samples))):
        masks = draw_dropout_masks(cfg, rng) if dropout else None
        logits, sigma, _, _ = forward(weights, feats, pvec, masks)
        if hetero_noise:
            logits = logits + sigma[:, None] * rng.standard_normal(logits.shape)
        post = _softmax(logits)
        probs = np.zeros((cfg.n_classes,) + image.dims, dtype=np.float32)
        for c in range(cfg.n_classes):
            probs[c][inside] = post[:, c]
        out.append(SoftSegmentation.from_probs(probs, mask))
    return out


# ---------------------------------------------------------------------------
# Checkpoint I/O (JSON header + little-endian float64 payload)
# ---------------------------------------------------------------------------

CKPT_MAGIC = "PSCKPT1"


def _ckpt_paths(path):
    path = str(path)
    for suffix in (".ckpt.json", ".ckpt.raw"):
        if path.endswith(suffix):
            path = path[: -len(suffix)]
    return path + ".ckpt.json", path + ".ckpt.raw"


def save_checkpoint(weights, path, meta=None):
    cfg = weights.config
    spec = _param_spec(cfg)
    header = {
        "magic": CKPT_MAGIC,
        "dtype": "f64le",
        "conditioned": weights.conditioned,
        "params": [{"name": n, "shape": list(s)} for n, s in spec],
        "config": {
            "hidden_widths": list(cfg.hidden_widths),
            "embed_widths": list(cfg.embed_widths),
            "dropout_first": cfg.dropout_first,
            "dropout_rest": cfg.dropout_rest,
            "heteroscedastic": cfg.heteroscedastic,
            "t_samples": cfg.t_samples,
            "lambda_strat": cfg.lambda_strat,
            "intensity_scale": cfg.intensity_scale,
            "n_classes": cfg.n_classes,
        },
        "param_schema": list(PARAM_SCHEMA),
        "param_scale": list(PARAM_SCALE),
        "meta": meta or {},
    }
    json_path, raw_path = _ckpt_paths(path)
    payload = b"".join(
        np.ascontiguousarray(weights.params[n], dtype="<f8").tobytes()
        for n, _ in spec
    )
    with open(json_path, "w") as fh:
        json.dump(header, fh, sort_keys=True, indent=1)
        fh.write("\n")
    with open(raw_path, "wb") as fh:
        fh.write(payload)


def load_checkpoint(path):
    json_path, raw_path = _ckpt_paths(path)
    with open(json_path) as fh:
        header = json.load(fh)
    if header.get("magic") != CKPT_MAGIC:
        raise ModelError(f"not a checkpoint: {json_path}")
    c = header["config"]
    cfg = MlpConfig(
        hidden_widths=tuple(c["hidden_widths"]),
        embed_widths=tuple(c["embed_widths"]),
        dropout_first=c["dropout_first"],
        dropout_rest=c["dropout_rest"],
        heteroscedastic=c["heteroscedastic"],
        t_samples=c["t_samples"],
        lambda_strat=c["lambda_strat"],
        intensity_scale=c["intensity_scale"],
        n_classes=c["n_classes"],
    )
    flat = np.fromfile(raw_path, dtype="<f8")
    expected = sum(int(np.prod(s)) for _, s in _param_spec(cfg))
    if flat.size != expected:
        raise ModelError(
            f"checkpoint payload length mismatch: expected {expected}, got {flat.size}"
        )
    shell = ModelWeights(cfg, bool(header["conditioned"]), {})
    loaded = shell.unflatten(flat)
    return loaded, dict(header.get("meta", {}))


def write_train_log(log, path):
    """Training log as CSV, one row per epoch."""
    import csv
    if not log:
        return
    fields = list(log[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in log:
            writer.writerow(row)
