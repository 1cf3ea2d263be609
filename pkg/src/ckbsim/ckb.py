"""Channel knowledge base: a transformer regressor from fused environment
tokens to a channel-matrix estimate, its training loop, a materialized
store and the knowledge-perturbation tool.

Targets are ``H`` viewed as interleaved (re, im) reals, divided by the
dataset scale ``c_h``.  All reported MSEs are in those normalized units.
"""

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .datastore import split
from .envsense import (DEFAULT_KAPPA, GRID, ImageEncoder, LabelMap, LocationEncoder,
                       SemanticEncoder, adaptive_roi_radius, descriptor_features, location_input,
                       roi_mask, roi_semantic_vector)
from .errors import ConfigError, DimensionError, KnowledgeLookupError, NumericError
from .fusion import make_fusion
from .pipeline import channel_scale
from .scene import NUM_CLASSES
from .tensorkit import (Adam, LayerNorm, Linear, Module, ParameterSet, Tensor,
                        TransformerEncoderLayer, no_grad)
from .tensorkit import functional as F

LOCATION_DIM = 6
IMAGE_DIM = GRID * GRID * (NUM_CLASSES + 1)
SOURCES = ("generated", "ground_truth", "perturbed")


@dataclass(frozen=True)
class ChannelKnowledge:
    H_ne: np.ndarray
    source: str = "generated"

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ConfigError(f"unknown knowledge source {self.source!r}")
        if not np.all(np.isfinite(self.H_ne)):
            raise ConfigError("channel knowledge has non-finite entries")


# -- normalization ------------------------------------------------------------------
def channel_to_target(H, c_h):
    """(..., K, M) complex -> (..., 2KM) normalized reals, interleaved."""
    H = np.asarray(H, dtype=np.complex128)
    flat = np.stack([H.real, H.imag], axis=-1).reshape(*H.shape[:-2], -1)
    return flat / c_h


def target_to_channel(y, c_h, shape=(16, 16)):
    y = np.asarray(y, dtype=np.float64) * c_h
    pairs = y.reshape(*y.shape[:-1], shape[0], shape[1], 2)
    return pairs[..., 0] + 1j * pairs[..., 1]


# -- features -------------------------------------------------------------------------
def sample_features(samples, manifest, radius="stored", z_eff=None, kappa=None,
                    use_location=True):
    """Feature matrix rows [location | descriptor | semantics] for a list of
    :class:`EnvSample`.

    ``radius`` is ``"stored"`` (use the radius recorded at generation),
    ``"adaptive"`` or a fixed pixel radius; semantics are recomputed from the
    stored label maps whenever anything but the stored vectors is asked for.
    """
    kappa = manifest.extra.get("kappa", DEFAULT_KAPPA) if kappa is None else kappa
    world = manifest.extra.get("world_scale", 480.0)
    h, w = manifest.resolution
    per_cell = (h // manifest.grid) * (w // manifest.grid)
    rows = []
    for s in samples:
        loc = location_input(s.bs_pos.astype(np.float64), s.cu_pos.astype(np.float64), world)
        if not use_location:
            loc = np.zeros_like(loc)
        img = descriptor_features(s.descriptor.astype(np.float64), per_cell)
        label_map = LabelMap(s.labels, (h // 2, w // 2))
        if radius == "stored" and z_eff is None:
            area = int(roi_mask(s.labels.shape, label_map.cu_pixel, s.d_r).sum())
            vec = s.j_po.astype(np.float64) / area
        else:
            d_r = s.d_r if radius == "stored" else (
                adaptive_roi_radius(label_map) if radius == "adaptive" else int(radius))
            vec = roi_semantic_vector(label_map, d_r, kappa, z_eff=z_eff).normalized()
        rows.append(np.concatenate([loc, img, vec]))
    return np.array(rows)


def sample_targets(samples, c_h):
    return np.array([channel_to_target(s.H, c_h) for s in samples])


def _split_features(X, semantic_dim):
    X = np.asarray(X)
    if X.shape[1] != LOCATION_DIM + IMAGE_DIM + semantic_dim:
        raise DimensionError(f"expected {LOCATION_DIM + IMAGE_DIM + semantic_dim} feature "
                             f"columns, got {X.shape[1]}")
    a, b = LOCATION_DIM, LOCATION_DIM + IMAGE_DIM
    return X[:, :a], X[:, a:b], X[:, b:]


# -- network ----------------------------------------------------------------------------
class CKBNetwork(Module):
    """Encoders -> fusion -> transformer encoder -> mean pool -> linear head."""

    def __init__(self, rng, semantic_dim=NUM_CLASSES, fusion="attention", gating="adaptive",
                 tokens=8, d_model=64, heads=4, layers=2, d_ff=256, out_features=512):
        self.loc = LocationEncoder(rng)
        self.img = ImageEncoder(rng)
        self.sem = SemanticEncoder(rng, semantic_dim)
        dims = (self.loc.out_features, self.img.out_features, self.sem.out_features)
        self.fusion = make_fusion(fusion, dims, rng, tokens=tokens, d_model=d_model, heads=heads,
                                  mode=gating)
        self.layers = [TransformerEncoderLayer(d_model, heads, d_ff, rng) for _ in range(layers)]
        self.norm = LayerNorm(d_model)
        self.head = Linear(d_model, out_features, rng, zero_init=True)
        self.semantic_dim = semantic_dim

    def forward(self, location, image, semantics):
        x = self.fusion(self.loc(location), self.img(image), self.sem(semantics))
        for layer in self.layers:
            x = layer(x)
        return self.head(F.mean_pool(self.norm(x), axis=1))

    def forward_features(self, X):
        return self.forward(*(Tensor(part) for part in _split_features(X, self.semantic_dim)))


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return np.array_split(order, max(1, math.ceil(n / batch_size)))


def _strip(tensors, prefix, keep=False):
    if keep:
        return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    return {k: v for k, v in tensors.items() if not k.startswith(prefix)}


def predict_network(net, X, batch_size=256):
    net.eval()
    out = []
    with no_grad():
        for lo in range(0, len(X), batch_size):
            out.append(net.forward_features(X[lo:lo + batch_size]).data.astype(np.float64))
    return np.concatenate(out) if out else np.zeros((0, net.head.weight.shape[1]))


class CKBRegressor(RegressorMixin, BaseEstimator):
    """Estimator wrapper: ``X`` rows are [location | descriptor | semantics]
    features (see :func:`sample_features`), ``y`` rows normalized channel
    reals.

    ``fit`` accepts ``eval_set=(X_val, y_val)`` for per-epoch validation,
    early stopping with ``patience`` and restoring the best epoch.
    """

    def __init__(self, fusion="attention", gating="adaptive", epochs=200, batch_size=32, lr=1e-3,
                 patience=20, seed=42, tokens=8, d_model=64, heads=4, layers=2, d_ff=256,
                 max_steps=None, verbose=False):
        self.fusion = fusion
        self.gating = gating
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.patience = patience
        self.seed = seed
        self.tokens = tokens
        self.d_model = d_model
        self.heads = heads
        self.layers = layers
        self.d_ff = d_ff
        self.max_steps = max_steps
        self.verbose = verbose

    def _build(self, semantic_dim, out_features):
        rng = np.random.default_rng(self.seed)
        return CKBNetwork(rng, semantic_dim, self.fusion, self.gating, self.tokens, self.d_model,
                          self.heads, self.layers, self.d_ff, out_features)

    def fit(self, X, y, eval_set=None, resume=None):
        """Train from scratch, or continue from ``resume`` (a
        :class:`ParameterSet` and meta dict as produced by
        :meth:`training_state`)."""
        X = check_array(X, dtype=np.float64)
        y = check_array(y, dtype=np.float64)
        if len(X) == 0 or len(X) != len(y):
            raise ConfigError("training split is empty or misaligned")
        semantic_dim = X.shape[1] - LOCATION_DIM - IMAGE_DIM
        if semantic_dim < 1:
            raise DimensionError(f"{X.shape[1]} feature columns is too few")
        self.semantic_dim_ = semantic_dim
        self.n_outputs_ = y.shape[1]
        net = self._build(semantic_dim, y.shape[1])
        opt = Adam(net.named_parameters(), lr=self.lr)
        history, best, best_state, stale, steps, first = [], math.inf, None, 0, 0, 1
        if resume is not None:
            params, meta = resume
            ParameterSet(_strip(params.tensors, "best."), params.optimizer).restore(net, opt)
            best_tensors = _strip(params.tensors, "best.", keep=True)
            best_state = ParameterSet(best_tensors) if best_tensors else None
            history = [tuple(h) for h in meta["history"]]
            best, stale, steps = meta["best"], meta["stale"], meta["steps"]
            first = len(history) + 1
        self.network_, self.optimizer_ = net, opt
        for epoch in range(first, self.epochs + 1):
            net.train()
            losses, counts = [], []
            # one generator per epoch so a resumed run draws the same batches
            rng = np.random.default_rng([self.seed + 1, epoch])
            for idx in _batches(len(X), self.batch_size, rng):
                if len(idx) < 2:
                    continue  # batch statistics need two rows
                opt.zero_grad()
                steps += 1
                try:
                    loss = F.mse_loss(net.forward_features(X[idx]), Tensor(y[idx]))
                    if not np.isfinite(loss.data):
                        raise NumericError("loss is not finite")
                    loss.backward()
                except NumericError as exc:
                    raise NumericError(f"CKB training diverged at step {steps} "
                                       f"(epoch {epoch}): {exc}") from exc
                opt.step()
                losses.append(float(loss.data))
                counts.append(len(idx))
                if self.max_steps is not None and steps >= self.max_steps:
                    break
            train_mse = float(np.average(losses, weights=counts)) if losses else math.nan
            val_mse = math.nan
            if eval_set is not None:
                val_mse = float(np.mean((predict_network(net, eval_set[0]) - eval_set[1]) ** 2))
            history.append((epoch, train_mse, val_mse))
            if self.verbose:
                print(f"epoch {epoch:4d} train {train_mse:.6e} val {val_mse:.6e}")
            score = val_mse if eval_set is not None else train_mse
            if score < best:
                best, stale = score, 0
                best_state = ParameterSet.capture(net)
            else:
                stale += 1
            if (self.patience is not None and stale >= self.patience) or \
                    (self.max_steps is not None and steps >= self.max_steps):
                break
        self._progress = (history, best, best_state, stale, steps)
        self.history_ = history
        self.best_score_ = best
        last = ParameterSet.capture(net, opt)
        if best_state is not None:
            last.tensors.update({f"best.{k}": v for k, v in best_state.tensors.items()})
            best_state.restore(net)
        self._last_state = last
        return self

    def training_state(self):
        """(ParameterSet, meta) snapshot of the last completed epoch, taken
        before the best epoch is restored; feed it back through
        ``fit(..., resume=...)`` to continue."""
        history, best, best_state, stale, steps = self._progress
        return self._last_state, {"history": [list(h) for h in history], "best": best,
                                  "stale": stale, "steps": steps}

    def predict(self, X):
        check_is_fitted(self, "network_")
        X = check_array(X, dtype=np.float64)
        return predict_network(self.network_, X)


# -- training entry point --------------------------------------------------------------
@dataclass
class CKBModel:
    regressor: CKBRegressor
    c_h: float
    radius: object = "stored"
    z_eff: int = None
    kappa: float = None
    use_location: bool = True

    def features(self, samples, manifest):
        return sample_features(samples, manifest, self.radius, self.z_eff, self.kappa,
                               self.use_location)

    def generate(self, samples, manifest):
        """Complex K x M estimates for every sample."""
        pred = self.regressor.predict(self.features(samples, manifest))
        return target_to_channel(pred, self.c_h, manifest.channel_shape)


def model_checkpoint(model):
    """(ParameterSet, meta) describing a trained :class:`CKBModel`."""
    reg = model.regressor
    meta = {"kind": "ckb", "hyper": reg.get_params(), "semantic_dim": reg.semantic_dim_,
            "n_outputs": reg.n_outputs_, "c_h": model.c_h, "radius": model.radius,
            "z_eff": model.z_eff, "kappa": model.kappa, "use_location": model.use_location}
    return ParameterSet.capture(reg.network_), meta


def model_from_checkpoint(params, meta):
    if meta.get("kind") != "ckb":
        raise ConfigError("checkpoint does not hold a CKB model")
    reg = CKBRegressor(**meta["hyper"])
    reg.semantic_dim_, reg.n_outputs_ = meta["semantic_dim"], meta["n_outputs"]
    reg.network_ = params.restore(reg._build(reg.semantic_dim_, reg.n_outputs_))
    return CKBModel(reg, meta["c_h"], meta["radius"], meta["z_eff"], meta["kappa"],
                    meta["use_location"])


def train_ckb(samples, manifest, ratio=(3, 1), seed=42, radius="stored", z_eff=None, kappa=None,
              use_location=True, **hyper):
    """Split, normalize and fit. Returns (CKBModel, history, (train, test))."""
    if len(samples) < 8:
        raise ConfigError("CKB training needs at least 8 samples")
    train, test = split(samples, ratio, seed)
    c_h = channel_scale([s.H for s in train])
    model = CKBModel(CKBRegressor(seed=seed, **hyper), c_h, radius, z_eff, kappa, use_location)
    X_tr, X_te = model.features(train, manifest), model.features(test, manifest)
    y_tr, y_te = sample_targets(train, c_h), sample_targets(test, c_h)
    model.regressor.fit(X_tr, y_tr, eval_set=(X_te, y_te))
    return model, model.regressor.history_, (train, test)


def heldout_mse(model, samples, manifest):
    pred = model.regressor.predict(model.features(samples, manifest))
    return float(np.mean((pred - sample_targets(samples, model.c_h)) ** 2))


def generate_channel_knowledge(model, samples, manifest):
    return [ChannelKnowledge(h) for h in model.generate(samples, manifest)]


# -- store ---------------------------------------------------------------------------
class CKBStore:
    """Materialized knowledge entries keyed by sample index, with the model
    as fallback for keys not in the store."""

    def __init__(self, entries=None, model=None, manifest=None):
        self.entries = {int(k): np.asarray(v) for k, v in (entries or {}).items()}
        self.model = model
        self.manifest = manifest
        self._cache = {}

    @classmethod
    def build(cls, model, samples, manifest):
        estimates = model.generate(samples, manifest)
        return cls({s.index: h.astype(np.complex64) for s, h in zip(samples, estimates)},
                   model, manifest)

    def __len__(self):
        return len(self.entries)

    def __contains__(self, key):
        return int(key) in self.entries

    def lookup(self, key, sample=None):
        """Stored entry for ``key``; novel keys need ``sample`` and a model."""
        key = int(key)
        if key not in self._cache:
            if key in self.entries:
                self._cache[key] = ChannelKnowledge(self.entries[key])
            elif self.model is not None and sample is not None:
                h = self.model.generate([sample], self.manifest)[0].astype(np.complex64)
                self._cache[key] = ChannelKnowledge(h)
            else:
                raise KnowledgeLookupError(f"no knowledge entry for key {key}")
        return self._cache[key]


def perturb_knowledge(H, eem, seed=0):
    """Add circular Gaussian error with RMS(E) / RMS(H) = eem in expectation."""
    if eem < 0:
        raise ConfigError("eem must be non-negative")
    H = np.asarray(getattr(H, "entries", getattr(H, "H_ne", H)))
    if eem == 0:
        return ChannelKnowledge(H.copy(), "perturbed")
    rng = np.random.default_rng(seed)
    rms = math.sqrt(float(np.mean(np.abs(H) ** 2)))
    noise = (rng.standard_normal(H.shape) + 1j * rng.standard_normal(H.shape)) / math.sqrt(2)
    return ChannelKnowledge((H + eem * rms * noise).astype(H.dtype), "perturbed")


__all__ = [
    "CKBModel", "CKBNetwork", "CKBRegressor", "CKBStore", "ChannelKnowledge",
    "channel_to_target", "generate_channel_knowledge", "heldout_mse", "model_checkpoint",
    "model_from_checkpoint", "perturb_knowledge",
    "sample_features", "sample_targets", "target_to_channel", "train_ckb",
]
