"""In-training CVAE baseline: encoder/decoder conditioned on the classifier's
predicted label, a per-class mixture-of-Gaussians latent prior, and a
classifier head sharing the encoder trunk, all trained in one Adam run.
Counterfactuals come from decoding the query's latent under the flipped
label."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import container, nn
from .diffusion import CounterfactualBatch

log = logging.getLogger(__name__)


@dataclass
class VcnetConfig:
    hidden: tuple[int, ...] = (64, 32)
    latent_dim: int = 16
    components: int = 5
    lr: float = 5e-4
    epochs: int = 200
    batch_size: int = 256
    w_recon: float = 1.0
    w_kl: float = 0.5
    w_cls: float = 1.0
    condition_on_true_labels: bool = False


@dataclass
class MoGPrior:
    """Per class label: component means, diagonal log-variances, and weight
    logits (weights are the softmax, so they stay normalized)."""

    means: np.ndarray          # (2, C, L)
    logvars: np.ndarray        # (2, C, L)
    weight_logits: np.ndarray  # (2, C)

    @property
    def components(self) -> int:
        return self.means.shape[1]

    def weights(self, label: int) -> np.ndarray:
        return nn.softmax(self.weight_logits[label][None, :])[0]

    def log_prob(self, z, label_col):
        """log p(z | y) per row plus the component responsibilities."""
        m = self.means[label_col]        # (B, C, L)
        lv = self.logvars[label_col]
        wl = self.weight_logits[label_col]
        mx_w = wl.max(axis=1, keepdims=True)
        log_w = wl - mx_w - np.log(np.exp(wl - mx_w).sum(axis=1, keepdims=True))
        diff = z[:, None, :] - m
        comp = -0.5 * (np.log(2 * np.pi) + lv + diff**2 * np.exp(-lv)).sum(axis=2)
        joint = log_w + comp
        mx = joint.max(axis=1, keepdims=True)
        log_p = mx[:, 0] + np.log(np.exp(joint - mx).sum(axis=1))
        resp = np.exp(joint - mx)
        resp /= resp.sum(axis=1, keepdims=True)
        return log_p, resp


@dataclass
class Cvae:
    trunk: nn.DenseNet       # x -> representation h
    latent_head: nn.DenseNet  # [h, onehot(y)] -> [mu, logvar]
    decoder: nn.DenseNet      # [z, onehot(y)] -> [num means, cat logits]
    latent_dim: int
    n_num: int
    cat_sizes: tuple[int, ...]


@dataclass
class VcnetClassifier:
    head: nn.DenseNet  # h -> sigmoid probability


@dataclass
class VcnetModels:
    cvae: Cvae
    prior: MoGPrior
    clf: VcnetClassifier
    kl_curve: list = field(default_factory=list)
    kl_collapsed: bool = False

    def save(self, path) -> None:
        cv = self.cvae
        nets = {"trunk": cv.trunk, "latent": cv.latent_head, "decoder": cv.decoder, "clf": self.clf.head}
        meta = {
            "latent_dim": cv.latent_dim,
            "n_num": cv.n_num,
            "cat_sizes": list(cv.cat_sizes),
            "nets": {
                name: {
                    "sizes": [net.input_dim] + [l.w.shape[1] for l in net.layers],
                    "activations": [l.activation for l in net.layers],
                }
                for name, net in nets.items()
            },
        }
        arrays = []
        for name, net in nets.items():
            for i, layer in enumerate(net.layers):
                arrays.append((f"{name}.w{i}", layer.w))
                arrays.append((f"{name}.b{i}", layer.b))
        arrays += [
            ("prior.means", self.prior.means.reshape(-1, self.prior.means.shape[-1])),
            ("prior.logvars", self.prior.logvars.reshape(-1, self.prior.logvars.shape[-1])),
            ("prior.weight_logits", self.prior.weight_logits),
        ]
        container.save(path, "vcnet", meta, arrays)

    @staticmethod
    def load(path) -> "VcnetModels":
        kind, meta, arrays = container.load(path)
        if kind != "vcnet":
            raise container.ContainerError(f"{path}: expected vcnet, got {kind}")
        nets = {}
        for name, spec in meta["nets"].items():
            layers = [
                nn.Layer(arrays[f"{name}.w{i}"], arrays[f"{name}.b{i}"], act)
                for i, act in enumerate(spec["activations"])
            ]
            nets[name] = nn.DenseNet(layers)
        C2, L = arrays["prior.means"].shape
        prior = MoGPrior(
            arrays["prior.means"].reshape(2, C2 // 2, L).astype(np.float64),
            arrays["prior.logvars"].reshape(2, C2 // 2, L).astype(np.float64),
            arrays["prior.weight_logits"].astype(np.float64),
        )
        cvae = Cvae(
            nets["trunk"], nets["latent"], nets["decoder"],
            meta["latent_dim"], meta["n_num"], tuple(meta["cat_sizes"]),
        )
        return VcnetModels(cvae, prior, VcnetClassifier(nets["clf"]))


def _label_onehot(labels01) -> np.ndarray:
    out = np.zeros((len(labels01), 2), dtype=np.float32)
    out[np.arange(len(labels01)), np.asarray(labels01, dtype=np.int64)] = 1.0
    return out


def gaussian_kl_closed_form(mu, logvar, m, lv):
    """KL(N(mu, e^logvar) || N(m, e^lv)) per row, summed over dims."""
    return 0.5 * np.sum(
        lv - logvar + (np.exp(logvar) + (mu - m) ** 2) * np.exp(-lv) - 1.0, axis=1
    )


def train_vcnet(dataset, preprocessor, cfg: VcnetConfig, seed: int) -> VcnetModels:
    """Joint loss: reconstruction + w_kl * single-sample MC KL against the
    MoG prior + classification BCE. The CVAE conditioning label is the
    classifier head's prediction unless condition_on_true_labels is set."""
    rng = np.random.default_rng(seed)
    X = preprocessor.encode_dataset(dataset)
    n_num, cat_sizes = preprocessor.n_num, preprocessor.cat_sizes
    n_cat = max(len(cat_sizes), 1)
    y = dataset.labels.astype(np.int64)
    L, C = cfg.latent_dim, cfg.components
    h_dim = cfg.hidden[-1]

    trunk = nn.build_net((X.shape[1], *cfg.hidden), ["relu"] * len(cfg.hidden), rng.integers(2**31))
    latent = nn.build_net((h_dim + 2, 2 * L), ["identity"], rng.integers(2**31))
    decoder = nn.build_net(
        (L + 2, *cfg.hidden[::-1], X.shape[1]),
        ["relu"] * len(cfg.hidden) + ["identity"],
        rng.integers(2**31),
    )
    clf_head = nn.build_net((h_dim, 1), ["sigmoid"], rng.integers(2**31))
    prior = MoGPrior(
        means=rng.normal(scale=0.5, size=(2, C, L)),
        logvars=np.zeros((2, C, L)),
        weight_logits=np.zeros((2, C)),
    )

    params = (
        nn.net_params(trunk) + nn.net_params(latent) + nn.net_params(decoder)
        + nn.net_params(clf_head) + [prior.means, prior.logvars, prior.weight_logits]
    )
    state = nn.adam_init(params, lr=cfg.lr)
    cat_slices = []
    start = n_num
    for K in cat_sizes:
        cat_slices.append(slice(start, start + K))
        start += K

    kl_curve = []
    for epoch in range(cfg.epochs):
        kl_sum, n_seen = 0.0, 0
        for idx in nn.iterate_minibatches(len(X), cfg.batch_size, rng):
            b = len(idx)
            xb = X[idx]
            h = nn.forward(trunk, xb)
            p = nn.forward(clf_head, h)[:, 0].astype(np.float64)
            cond = y[idx] if cfg.condition_on_true_labels else (p >= 0.5).astype(np.int64)
            y_oh = _label_onehot(cond)

            enc_in = np.concatenate([h, y_oh], axis=1)
            ml = nn.forward(latent, enc_in).astype(np.float64)
            mu, logvar = ml[:, :L], np.clip(ml[:, L:], -10.0, 10.0)
            eps0 = rng.standard_normal((b, L))
            sigma = np.exp(0.5 * logvar)
            z = mu + sigma * eps0

            dec_in = np.concatenate([z.astype(np.float32), y_oh], axis=1)
            out = nn.forward(decoder, dec_in)

            # reconstruction upstream
            upstream = np.zeros_like(out)
            num_err = out[:, :n_num].astype(np.float64) - xb[:, :n_num]
            upstream[:, :n_num] = (cfg.w_recon * 2.0 * num_err / (b * max(n_num, 1))).astype(np.float32)
            recon = float(np.mean(num_err**2, dtype=np.float64)) if n_num else 0.0
            for sl in cat_slices:
                probs = nn.softmax(out[:, sl].astype(np.float64))
                target = xb[:, sl].astype(np.float64)
                recon += float(-np.mean(np.sum(target * np.log(probs + 1e-30), axis=1)) / n_cat)
                upstream[:, sl] = (cfg.w_recon * (probs - target) / (b * n_cat)).astype(np.float32)

            dec_grads, g_dec_in = nn.backward(decoder, dec_in, upstream)
            gz = g_dec_in[:, :L].astype(np.float64)

            # KL(q || MoG prior), single-sample estimate
            log_q = np.sum(-0.5 * (np.log(2 * np.pi) + logvar + eps0**2), axis=1)
            log_p, resp = prior.log_prob(z, cond)
            kl = log_q - log_p
            m_c = prior.means[cond]
            lv_c = prior.logvars[cond]
            dlogp_dz = np.einsum("bc,bcl->bl", resp, (m_c - z[:, None, :]) * np.exp(-lv_c))

            g_mu = gz + (cfg.w_kl / b) * (-dlogp_dz)
            g_logvar = gz * (0.5 * sigma * eps0) + (cfg.w_kl / b) * (
                -0.5 - dlogp_dz * 0.5 * sigma * eps0
            )

            # prior parameter gradients (ascent on log p -> descent on KL)
            diff = z[:, None, :] - m_c
            gm_rows = resp[:, :, None] * diff * np.exp(-lv_c)
            glv_rows = resp[:, :, None] * (-0.5 + 0.5 * diff**2 * np.exp(-lv_c))
            w_soft = nn.softmax(prior.weight_logits[cond])
            gw_rows = resp - w_soft
            g_means = np.zeros_like(prior.means)
            g_logvars = np.zeros_like(prior.logvars)
            g_wlogits = np.zeros_like(prior.weight_logits)
            for label in (0, 1):
                rows = cond == label
                if rows.any():
                    g_means[label] = -(cfg.w_kl / b) * gm_rows[rows].sum(axis=0)
                    g_logvars[label] = -(cfg.w_kl / b) * glv_rows[rows].sum(axis=0)
                    g_wlogits[label] = -(cfg.w_kl / b) * gw_rows[rows].sum(axis=0)

            lat_up = np.concatenate([g_mu, g_logvar], axis=1).astype(np.float32)
            lat_grads, g_enc_in = nn.backward(latent, enc_in, lat_up)
            gh = g_enc_in[:, :h_dim]

            loss_vec, dldp = nn.bce_loss(p, y[idx])
            cls_up = (cfg.w_cls * dldp / b).astype(np.float32)[:, None]
            clf_grads, gh_cls = nn.backward(clf_head, h, cls_up)

            trunk_grads, _ = nn.backward(trunk, xb, gh + gh_cls)

            total = (
                cfg.w_recon * recon
                + cfg.w_kl * float(np.mean(kl, dtype=np.float64))
                + cfg.w_cls * float(np.mean(loss_vec, dtype=np.float64))
            )
            if not np.isfinite(total):
                raise nn.TrainingDiverged(f"vcnet loss non-finite at epoch {epoch}")
            grads = (
                trunk_grads + lat_grads + dec_grads + clf_grads
                + [g_means, g_logvars, g_wlogits]
            )
            nn.adam_step(state, params, grads)
            kl_sum += float(kl.sum())
            n_seen += b
        kl_epoch = kl_sum / n_seen
        kl_curve.append(kl_epoch)

    collapsed = bool(kl_curve and abs(kl_curve[-1]) < 1e-3)
    if collapsed:
        log.warning("train_vcnet: KL below 1e-3 for the last epoch (posterior collapse?)")
    cvae = Cvae(trunk, latent, decoder, L, n_num, cat_sizes)
    return VcnetModels(cvae, prior, VcnetClassifier(clf_head), kl_curve, collapsed)


def _decode_rows(models: VcnetModels, z, y_oh, preprocessor):
    out = nn.forward(models.cvae.decoder, np.concatenate([z.astype(np.float32), y_oh], axis=1))
    n_num = models.cvae.n_num
    blocks = [out[:, :n_num]]
    start = n_num
    for K in models.cvae.cat_sizes:
        logits = out[:, start : start + K]
        block = np.zeros_like(logits)
        block[np.arange(len(logits)), np.argmax(logits, axis=1)] = 1.0
        blocks.append(block)
        start += K
    return preprocessor.decode(np.concatenate(blocks, axis=1))


def generate_cf(models: VcnetModels, query_num, query_cat, y_target, preprocessor, blackbox, seed, query_id=0) -> CounterfactualBatch:
    """Draw z' from q(z | x, y_pred) and decode it under the flipped label."""
    return generate_cf_pool(
        models, np.asarray(query_num)[None], np.asarray(query_cat)[None],
        y_target, preprocessor, blackbox, seed, query_ids=[query_id],
    )[0]


def generate_cf_pool(models, num, cat, y_target, preprocessor, blackbox, seed, query_ids=None):
    t0 = time.perf_counter()
    ids = np.arange(len(num)) if query_ids is None else np.asarray(query_ids)
    X = preprocessor.encode(num, cat)
    h = nn.forward(models.cvae.trunk, X)
    p = nn.forward(models.clf.head, h)[:, 0]
    y_pred = (p >= 0.5).astype(np.int64)
    ml = nn.forward(models.cvae.latent_head, np.concatenate([h, _label_onehot(y_pred)], axis=1))
    L = models.cvae.latent_dim
    mu, logvar = ml[:, :L].astype(np.float64), np.clip(ml[:, L:].astype(np.float64), -10, 10)
    eps = np.stack([np.random.default_rng([int(seed), int(q), 0]).standard_normal(L) for q in ids])
    z = mu + np.exp(0.5 * logvar) * eps
    y_oh = _label_onehot(np.full(len(num), y_target, dtype=np.int64))
    cand_num, cand_cat = _decode_rows(models, z, y_oh, preprocessor)
    probs = blackbox.predict_proba(preprocessor.encode(cand_num, cand_cat))
    per_query = (time.perf_counter() - t0) / len(num)
    return [
        CounterfactualBatch(
            query_id=int(ids[i]),
            query_num=num[i].copy(),
            query_cat=cat[i].copy(),
            cand_num=cand_num[i : i + 1],
            cand_cat=cand_cat[i : i + 1],
            validity=(probs[i : i + 1] < 0.5) if y_target == 0 else (probs[i : i + 1] >= 0.5),
            prob=probs[i : i + 1],
            seconds=per_query,
        )
        for i in range(len(num))
    ]
