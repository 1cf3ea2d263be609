"""Knowledge-aided joint source-channel coding of 32 x 32 RGB images over
the ray-traced MIMO link.

One image becomes 1024 complex symbols, sent as ``L = 64`` blocks of
``M = 16`` through the same channel matrix, and the decoder rebuilds the
image from the received blocks.  Channel knowledge enters both ends via a
shared vectorizer whose output is broadcast-added to a 64-channel map.

Channel matrices are divided by the dataset scale ``c_h`` before use, a
fixed receive gain that keeps every layer's input at unit order; the SNR
definition is scale invariant so this changes nothing physically.
"""

import math

import numpy as np
from sklearn.base import BaseEstimator

from .ckb import channel_to_target
from .errors import ConfigError, DegenerateChannelError, DimensionError, NumericError
from .metrics import psnr, ssim
from .tensorkit import (Adam, BatchNorm, Conv1d, Conv2d, ConvTranspose2d, InstanceNorm2d, Linear,
                        Module, PReLU, ParameterSet, Tensor, no_grad, precision)
from .tensorkit import functional as F

MODES = ("ckb", "true_csi", "no_knowledge")
BLOCKS = 64
NOISELESS = math.inf


# -- channel ------------------------------------------------------------------------
def _complex_matmul(xr, xi, hr, hi):
    """y = H x for blocks x (B, L, M) and H (B, K, M), split into re/im."""
    hrt, hit = np.swapaxes(hr, -1, -2), np.swapaxes(hi, -1, -2)
    return xr @ hrt - xi @ hit, xr @ hit + xi @ hrt


def channel_tensor(xr, xi, H, snr_db=NOISELESS, noise=None, noise_var=None):
    """Differentiable channel application on real/imag tensors.

    ``H`` is a complex (B, K, M) array; ``noise`` a complex (B, L, K)
    standard CSCG draw (unit variance per entry). σ² is set per batch
    element so that E||Hx||² / (K σ²) is the requested SNR, the expectation
    taken over that element's blocks; ``noise_var`` overrides it.
    """
    H = np.asarray(H)
    if H.ndim == 2:
        H = H[None]
    if H.shape[-1] != xr.shape[-1]:
        raise DimensionError(f"channel has {H.shape[-1]} transmit antennas, blocks have "
                             f"{xr.shape[-1]} symbols")
    yr, yi = _complex_matmul(xr, xi, H.real, H.imag)
    if noise is None or (noise_var is None and snr_db == NOISELESS):
        return yr, yi
    k = H.shape[-2]
    if noise_var is None:
        if not np.all(np.any(H != 0, axis=(-2, -1))):
            raise DegenerateChannelError("zero channel matrix: noise level is undefined")
        power = (yr * yr + yi * yi).sum(axis=-1).mean(axis=-1)  # (B,)
        sigma = (power * (1.0 / (k * 10.0 ** (snr_db / 10.0)))).sqrt().reshape(-1, 1, 1)
    else:
        sigma = Tensor(np.full((1, 1, 1), math.sqrt(noise_var)))
    return yr + sigma * Tensor(noise.real), yi + sigma * Tensor(noise.imag)


def cscg(rng, shape):
    """Unit-variance circularly symmetric complex Gaussian samples."""
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2.0)


def apply_channel(x, H, snr_db=NOISELESS, seed=0, noise_var=None):
    """y_l = H x_l + n_l for complex blocks ``x`` (L, M). ``snr_db=inf``
    is the noiseless case."""
    x = np.asarray(x, dtype=np.complex128)
    H = np.asarray(H, dtype=np.complex128)
    if x.ndim != 2 or H.ndim != 2 or x.shape[1] != H.shape[1]:
        raise DimensionError(f"blocks {x.shape} do not match channel {H.shape}")
    noisy = noise_var is not None or snr_db != NOISELESS
    noise = cscg(np.random.default_rng(seed), (1, x.shape[0], H.shape[0])) if noisy else None
    with no_grad(), precision(np.float64):
        yr, yi = channel_tensor(Tensor(x.real[None]), Tensor(x.imag[None]), H[None], snr_db,
                                noise, noise_var)
    return (yr.data + 1j * yi.data)[0]


# -- network pieces ------------------------------------------------------------------
class ResidualBlock(Module):
    """conv-BN-PReLU-conv-BN plus a projected skip, then PReLU."""

    def __init__(self, cin, cout, rng, stride=1):
        self.conv1 = Conv2d(cin, cout, 3, rng, stride=stride, padding=1)
        self.bn1 = BatchNorm(cout)
        self.act1 = PReLU(cout)
        self.conv2 = Conv2d(cout, cout, 3, rng, padding=1)
        self.bn2 = BatchNorm(cout)
        self.skip = Conv2d(cin, cout, 1, rng, stride=stride) if (cin != cout or stride != 1) \
            else None
        self.act2 = PReLU(cout)

    def forward(self, x):
        h = self.bn2(self.conv2(self.act1(self.bn1(self.conv1(x)))))
        return self.act2(h + (self.skip(x) if self.skip is not None else x))


class KnowledgeVectorizer(Module):
    """Two bias-free affine layers from flattened H_ne to one value per
    feature channel; zero knowledge maps to a zero vector."""

    def __init__(self, in_features, out_features, rng, hidden=128):
        self.fc1 = Linear(in_features, hidden, rng, bias=False)
        self.fc2 = Linear(hidden, out_features, rng, bias=False)

    def forward(self, h):
        return self.fc2(F.relu(self.fc1(h)))


class JSCCModel(Module):
    def __init__(self, rng, mode="ckb", c_h=1.0, antennas=(16, 16), blocks=BLOCKS,
                 image_size=32, widths=(16, 32, 64)):
        if mode not in MODES:
            raise ConfigError(f"unknown knowledge mode {mode!r}; expected one of {MODES}")
        k, m = antennas
        w1, w2, w3 = widths
        side = image_size // 4
        if 2 * m * blocks % (side * side):
            raise ConfigError("symbol budget does not tile the latent grid")
        latent = 2 * m * blocks // (side * side)
        if side * side != blocks:
            raise ConfigError(f"{blocks} blocks do not reshape to a {side}x{side} grid")
        self.mode = mode
        self.c_h = float(c_h)
        self.antennas = (k, m)
        self.blocks = blocks
        self.image_size = image_size
        # encoder: S -> S1 -> S2 -> S3
        self.res1 = ResidualBlock(3, w1, rng, stride=2)
        self.res2 = ResidualBlock(w1, w2, rng)
        self.down = Conv2d(w2, w3, 3, rng, stride=2, padding=1)
        self.vectorizer = KnowledgeVectorizer(2 * k * m, w3, rng)
        self.e1 = Conv2d(w3, w3, 3, rng, padding=1)
        self.inorm = InstanceNorm2d()
        self.e2 = Conv2d(w3, latent, 3, rng, padding=1)
        # decoder: y -> S4 -> S5 -> S'
        self.d1 = Conv1d(2 * k, w3, 3, rng, padding=1)
        self.d1_act = PReLU(w3)
        self.d2 = Conv1d(w3, w3, 3, rng, padding=1)
        self.fuse = Conv2d(w3, w3, 3, rng, padding=1)
        self.fuse_act = PReLU(w3)
        self.up = ConvTranspose2d(w3, w1, 4, rng, stride=4)
        self.up_act = PReLU(w1)
        self.out = Conv2d(w1, 3, 3, rng, padding=1)

    # knowledge ---------------------------------------------------------------
    def knowledge_vector(self, knowledge, batch):
        """(B, 64, 1, 1) injection tensor; zeros in no-knowledge mode."""
        k, m = self.antennas
        width = self.vectorizer.fc2.weight.shape[1]
        if self.mode == "no_knowledge" or knowledge is None:
            return Tensor(np.zeros((batch, width, 1, 1)))
        h = np.asarray(knowledge)
        if h.ndim == 2:
            h = np.broadcast_to(h, (batch,) + h.shape)
        if h.shape[1:] != (k, m):
            raise DimensionError(f"knowledge shape {h.shape[1:]} does not match {(k, m)}")
        return self.vectorizer(Tensor(channel_to_target(h, self.c_h))).reshape(batch, width, 1, 1)

    # encoder ------------------------------------------------------------------
    def encode_tensor(self, S, knowledge=None):
        """(B, 3, h, w) -> power-normalized real/imag blocks, each (B, L, M)."""
        if S.ndim != 4 or S.shape[1:] != (3, self.image_size, self.image_size):
            raise DimensionError(f"expected (B, 3, {self.image_size}, {self.image_size}) images, "
                                 f"got {S.shape}")
        b = S.shape[0]
        s3 = self.down(self.res2(self.res1(S)))
        z = self.e2(F.relu(self.inorm(self.e1(s3 + self.knowledge_vector(knowledge, b)))))
        m = self.antennas[1]
        pairs = z.reshape(b, self.blocks, m, 2).transpose(3, 0, 1, 2)
        xr, xi = pairs[0], pairs[1]
        power = (xr * xr + xi * xi).mean(axis=(1, 2)).reshape(b, 1, 1)
        scale = power.sqrt()
        return xr / scale, xi / scale

    # decoder -------------------------------------------------------------------
    def decode_tensor(self, yr, yi, knowledge=None):
        """Received (B, L, K) re/im blocks -> (B, 3, h, w) in [0, 1]."""
        k = self.antennas[0]
        if yr.ndim != 3 or yr.shape[1:] != (self.blocks, k):
            raise DimensionError(f"expected (B, {self.blocks}, {k}) received blocks, "
                                 f"got {yr.shape}")
        b = yr.shape[0]
        seq = F.concat([yr, yi], axis=-1).transpose(0, 2, 1)  # (B, 2K, L)
        s4 = self.d2(self.d1_act(self.d1(seq)))
        side = int(math.isqrt(self.blocks))
        s4 = s4.reshape(b, s4.shape[1], side, side)
        s5 = self.fuse_act(self.fuse(s4 + self.knowledge_vector(knowledge, b)))
        s5 = F.adaptive_avg_pool2d(s5, side)
        return F.sigmoid(self.out(self.up_act(self.up(s5))))

    def forward(self, S, H, knowledge=None, snr_db=NOISELESS, noise=None):
        xr, xi = self.encode_tensor(S, knowledge)
        yr, yi = channel_tensor(xr, xi, np.asarray(H) / self.c_h, snr_db, noise)
        return self.decode_tensor(yr, yi, knowledge)


def _nchw(images):
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    return images.transpose(0, 3, 1, 2)


def _knowledge_array(knowledge):
    if knowledge is None:
        return None
    return np.asarray(getattr(knowledge, "H_ne", knowledge))


def encode(model, S, knowledge=None):
    """Complex (L, M) symbol blocks for one h x w x 3 image (or a batch)."""
    model.eval()
    single = np.asarray(S).ndim == 3
    with no_grad():
        xr, xi = model.encode_tensor(Tensor(_nchw(S)), _knowledge_array(knowledge))
    x = xr.data.astype(np.float64) + 1j * xi.data.astype(np.float64)
    return x[0] if single else x


def decode(model, y, knowledge=None):
    """h x w x 3 image estimate from received (L, K) blocks (or a batch)."""
    model.eval()
    y = np.asarray(y)
    single = y.ndim == 2
    y = y[None] if single else y
    with no_grad():
        out = model.decode_tensor(Tensor(y.real), Tensor(y.imag), _knowledge_array(knowledge))
    img = out.data.astype(np.float64).transpose(0, 2, 3, 1)
    return img[0] if single else img


# -- training ---------------------------------------------------------------------
def _knowledge_for(model, channels, knowledge, idx):
    """Explicit ``knowledge`` wins; true-CSI mode otherwise sees the channel."""
    if model.mode == "no_knowledge":
        return None
    if knowledge is not None:
        return np.stack([_knowledge_array(knowledge[i]) for i in idx])
    if model.mode == "true_csi":
        return np.stack([channels[i] for i in idx])
    raise ConfigError("ckb mode needs a knowledge source")


def train_jscc(model, images, channels, knowledge=None, snrs=(NOISELESS,), steps=1000,
               batch_size=16, lr=1e-3, seed=0, verbose=False, log_every=50):
    """Minimize mean ||S' - S||² end-to-end. Each step draws images, paired
    environment samples (channel and knowledge) and one SNR from ``snrs``;
    noise is redrawn every step. Returns (model, history of (step, loss))."""
    images = np.asarray(images)
    if len(images) == 0:
        raise ConfigError("empty image corpus")
    if len(channels) == 0:
        raise ConfigError("no channel samples to train over")
    channels = [np.asarray(h) for h in channels]
    opt = Adam(model.named_parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    S_all = _nchw(images)
    history = []
    model.train()
    for step in range(1, steps + 1):
        idx = rng.choice(len(images), size=min(batch_size, len(images)), replace=False)
        env = rng.integers(0, len(channels), size=len(idx))
        snr = float(snrs[rng.integers(0, len(snrs))])
        H = np.stack([channels[i] for i in env])
        noise = cscg(rng, (len(idx), model.blocks, model.antennas[0]))
        S = Tensor(S_all[idx])
        opt.zero_grad()
        try:
            out = model(S, H, _knowledge_for(model, channels, knowledge, env), snr, noise)
            loss = F.mse_loss(out, S)
            if not np.isfinite(loss.data):
                raise NumericError("loss is not finite")
            loss.backward()
        except NumericError as exc:
            raise NumericError(f"JSCC training diverged at step {step}: {exc}") from exc
        opt.step()
        history.append((step, float(loss.data)))
        if verbose and step % log_every == 0:
            print(f"step {step:5d} loss {float(loss.data):.6e}")
    model.eval()
    return model, history


def evaluate_sweep(model, images, channels, snr_list, knowledge=None, pairs_per_image=2,
                   seed=1234, batch_size=64):
    """Rows (snr, psnr, ssim), averaged over image x environment pairs.

    Every image is paired with ``pairs_per_image`` environment samples
    chosen by ``seed``; each (pair, snr) triple has its own noise stream so
    results do not depend on batching.
    """
    images = np.asarray(images)
    channels = [np.asarray(h) for h in channels]
    pick = np.random.default_rng(seed)
    pairs = [(i, int(j)) for i in range(len(images))
             for j in pick.choice(len(channels), size=min(pairs_per_image, len(channels)),
                                  replace=False)]
    model.eval()
    S_all = _nchw(images)
    rows = []
    for si, snr in enumerate(snr_list):
        scores_p, scores_s = [], []
        for lo in range(0, len(pairs), batch_size):
            chunk = pairs[lo:lo + batch_size]
            idx = [p[0] for p in chunk]
            env = [p[1] for p in chunk]
            noise = np.concatenate([
                cscg(np.random.default_rng([seed, si, lo + n]), (1, model.blocks,
                                                                  model.antennas[0]))
                for n in range(len(chunk))])
            H = np.stack([channels[j] for j in env])
            with no_grad():
                out = model(Tensor(S_all[idx]), H, _knowledge_for(model, channels, knowledge, env),
                            float(snr), noise)
            recon = out.data.astype(np.float64).transpose(0, 2, 3, 1)
            for i, r in zip(idx, recon):
                scores_p.append(psnr(images[i], r))
                scores_s.append(ssim(images[i], r))
        rows.append((float(snr), float(np.mean(scores_p)), float(np.mean(scores_s))))
    return rows


class JSCCCodec(BaseEstimator):
    """Estimator wrapper around :class:`JSCCModel` and :func:`train_jscc`.

    ``fit(images, channels, knowledge=None)`` trains; ``score`` returns the
    mean SSIM over ``snrs``.
    """

    def __init__(self, mode="ckb", c_h=1.0, steps=1000, batch_size=16, lr=1e-3, seed=0,
                 snrs=(-5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 25.0), verbose=False):
        self.mode = mode
        self.c_h = c_h
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.snrs = snrs
        self.verbose = verbose

    def fit(self, images, channels, knowledge=None, resume=None):
        model = JSCCModel(np.random.default_rng(self.seed), self.mode, self.c_h)
        if resume is not None:
            resume.restore(model)
        self.model_, self.history_ = train_jscc(model, images, channels, knowledge, self.snrs,
                                                self.steps, self.batch_size, self.lr,
                                                self.seed + 1, self.verbose)
        return self

    def evaluate(self, images, channels, snr_list, knowledge=None, **kw):
        return evaluate_sweep(self.model_, images, channels, snr_list, knowledge, **kw)

    def score(self, images, channels, knowledge=None):
        rows = self.evaluate(images, channels, self.snrs, knowledge)
        return float(np.mean([r[2] for r in rows]))

    def parameters(self):
        return ParameterSet.capture(self.model_)


__all__ = [
    "BLOCKS", "JSCCCodec", "JSCCModel", "KnowledgeVectorizer", "MODES", "NOISELESS",
    "ResidualBlock", "apply_channel", "channel_tensor", "cscg", "decode", "encode",
    "evaluate_sweep", "train_jscc",
]
