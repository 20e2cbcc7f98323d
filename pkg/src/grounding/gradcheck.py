"""Finite-difference checks for every registered primitive and every loss.

Each case maps one input array to a scalar. Primitive outputs are contracted
with a fixed random weight so that every output element influences the
gradient. Pipeline cases perturb one parameter tensor of a tiny model and
run the whole image-to-loss forward pass on two generated scenes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import losses

TOLERANCE = 1e-4


@dataclass
class Case:
    name: str
    kind: str  # "primitive" or "loss"
    fn: Callable[[ad.Tensor], ad.Tensor]
    x: np.ndarray
    coords: list[int] | None = None  # None checks every coordinate


def _contract(out: ad.Tensor, rng) -> ad.Tensor:
    w = ad.Tensor(rng.standard_normal(out.shape))
    return ad.tsum(out * w)


def _spaced(rng, shape, gap=0.05):
    """Random values with pairwise gaps, so max has a unique winner."""
    n = int(np.prod(shape))
    vals = (np.arange(n) * gap + rng.uniform(0, gap / 4, n))
    return rng.permutation(vals).reshape(shape) - vals.mean()


def _away(x, others, gap=1e-3):
    """Nudge entries of ``x`` lying within ``gap`` of any of ``others`` so that
    no central difference straddles a max kink."""
    x = x.copy()
    for _ in range(len(others) + 1):
        close = np.zeros(x.shape, dtype=bool)
        for o in others:
            close |= np.abs(x - o) < gap
        if not close.any():
            break
        x[close] += 2 * gap
    return x


def primitive_cases(seed: int = 0) -> list[Case]:
    rng = np.random.default_rng(seed)
    c = rng.standard_normal((3, 4))
    pos = rng.uniform(0.5, 2.0, (3, 4))
    mat = rng.standard_normal((4, 5))
    kernel = rng.standard_normal((2, 3, 3, 3))
    others = [ad.Tensor(_spaced(rng, (3, 4)) + 0.013), ad.Tensor(_spaced(rng, (3, 4)) - 0.011)]
    vec = rng.standard_normal(6)
    idx = np.array([2, 0, 2, 1])

    def w(out):
        return _contract(out, np.random.default_rng(seed + 1))

    cases = [
        ("add", lambda x: w(x + ad.Tensor(c)), rng.standard_normal((3, 4))),
        ("sub", lambda x: w(ad.Tensor(c) - x), rng.standard_normal((3, 4))),
        ("mul", lambda x: w(x * x * ad.Tensor(c)), rng.standard_normal((3, 4))),
        ("div", lambda x: w(ad.Tensor(c) / x), pos),
        ("scale", lambda x: w(ad.scale(x, -2.5)), rng.standard_normal((3, 4))),
        ("matmul", lambda x: w(x @ ad.Tensor(mat)), rng.standard_normal((3, 4))),
        ("conv2d", lambda x: w(ad.conv2d(x, ad.Tensor(kernel), stride=2, pad=1)), rng.standard_normal((1, 3, 7, 7))),
        ("avgpool", lambda x: w(ad.avgpool(x)), rng.standard_normal((2, 3, 4, 4))),
        ("maximum", lambda x: w(ad.maximum([x, *others])), _spaced(rng, (3, 4))),
        ("log", lambda x: w(ad.log(x)), pos),
        ("sqrt", lambda x: w(ad.sqrt(x)), pos),
        ("sigmoid", lambda x: w(ad.sigmoid(x)), rng.standard_normal((3, 4))),
        ("logsigmoid", lambda x: w(ad.logsigmoid(x)), rng.standard_normal((3, 4))),
        ("tanh", lambda x: w(ad.tanh(x)), rng.standard_normal((3, 4))),
        ("dot", lambda x: ad.dot(x, ad.Tensor(vec)) * ad.dot(x, x), rng.standard_normal(6)),
        ("sum", lambda x: w(ad.tsum(x * x, axis=1, keepdims=True)), rng.standard_normal((3, 4))),
        ("sqnorm", lambda x: ad.sqnorm(x - ad.Tensor(c)), rng.standard_normal((3, 4))),
        ("concat", lambda x: w(ad.concat([x, x * x], axis=1)), rng.standard_normal((3, 4))),
        ("reshape", lambda x: w(x.reshape(4, 3) * ad.Tensor(c.T.copy())), rng.standard_normal((3, 4))),
        ("transpose", lambda x: w(x.transpose(1, 0) @ ad.Tensor(c)), rng.standard_normal((3, 4))),
        ("take", lambda x: w(ad.take(x, idx)), rng.standard_normal((3, 4))),
    ]
    return [Case(name, "primitive", fn, x) for name, fn, x in cases]


def loss_cases(seed: int = 0) -> list[Case]:
    rng = np.random.default_rng(seed)
    shape = (8, 8)
    masks = [ad.Tensor(rng.uniform(0.05, 0.95, shape)) for _ in range(3)]
    labels = np.array([1.0, -1.0, 1.0, -1.0, -1.0])
    h = losses.Hyperparams()

    def pc(x):
        return losses.loss_pc(x, masks[:2], 2) + losses.loss_pc(masks[2], [x, masks[0]], 2)

    def sib(x):
        return losses.loss_sib([[x, masks[0]], [masks[1], x, masks[2]]])

    def total(x):
        l_pc = losses.loss_pc(x, masks[:2], 1)
        l_sib = losses.loss_sib([[x, masks[2]]])
        l_disc = losses.batch_disc_loss(ad.tsum(x, axis=1) * (1.0 / 8), np.ones(8))
        return losses.combine(l_pc, l_sib, l_disc, h)

    raw = [m.data for m in masks]
    cases = [
        ("L_PC", pc, _away(rng.uniform(0.05, 0.95, shape), raw[:1])),
        ("L_SIB", sib, _away(rng.uniform(0.05, 0.95, shape), raw)),
        ("L_disc printed", lambda x: losses.batch_disc_loss(x, labels, "printed"), rng.standard_normal(5)),
        ("L_disc log-sigmoid", lambda x: losses.batch_disc_loss(x, labels, "log-sigmoid"), rng.standard_normal(5)),
        ("L total", total, _away(rng.uniform(0.05, 0.95, shape), raw[2:])),
    ]
    return [Case(name, "loss", fn, x) for name, fn, x in cases]


def pipeline_cases(seed: int = 0, per_param: int = 4) -> list[Case]:
    """Full forward pass (conv stack, embedding, GRU, masks, every loss) on
    32x32 two-object scenes, one case per parameter tensor.

    The single-image variant uses fixed normalisation statistics and checks
    every parameter. The two-image variant normalises with batch statistics;
    there the bias feeding the normalisation cancels out, its gradient is
    identically zero, and a relative check would only compare round-off, so
    it is skipped.
    """
    from . import scenes
    from .model import GroundingModel, ModelConfig
    from .training import forward_losses, make_batch, phrase_pool, prepare

    spec = scenes.SceneSpec(image_size=32, min_size=8, max_size=12)
    samples = scenes.generate_dataset(seed, 2, spec)
    examples = prepare(samples)
    pool = phrase_pool(examples)
    tokens = {t for s in samples for t in s.caption}
    h = losses.Hyperparams(lambda_pc=0.5, lambda_sib=0.5, negatives_per_image=2)
    rng = np.random.default_rng(seed + 1)
    cases = []
    for label, indices, activation, skip in (
        ("pipeline", [0], "linear", ()),
        ("pipeline batch-stats", [0, 1], "tanh", ("embed.fc2.b",)),
    ):
        cfg = ModelConfig(
            image_size=32, conv_widths=(2, 3, 4), embed_hidden=5, width=4, token_dim=4,
            embed_activation=activation, seed=seed,
        )
        model = GroundingModel.create(cfg, tokens)
        model.norm_mean = rng.standard_normal(cfg.width) * 0.1
        model.norm_var = rng.uniform(0.5, 2.0, cfg.width)
        batch = make_batch(examples, indices, np.random.default_rng(seed), h, pool)
        for name, value in model.params.items():
            if name in skip:
                continue

            def fn(x, name=name, model=model, batch=batch):
                p = {k: (x if k == name else ad.Tensor(v)) for k, v in model.params.items()}
                return forward_losses(model, batch, h, p, structural_language_grad=True)[0]

            coords = sorted(rng.choice(value.size, size=min(per_param, value.size), replace=False).tolist())
            cases.append(Case(f"{label} {name}", "pipeline", fn, value.copy(), coords))
    return cases


def all_cases(seed: int = 0) -> list[Case]:
    return primitive_cases(seed) + loss_cases(seed) + pipeline_cases(seed)


def run_all(seed: int = 0, eps: float = 1e-5) -> list[tuple[Case, float]]:
    return [(case, ad.finite_difference_check(case.fn, case.x, eps, case.coords)) for case in all_cases(seed)]


def format_table(results: list[tuple[Case, float]], tolerance: float = TOLERANCE) -> str:
    width = max(len(case.name) for case, _ in results)
    lines = [f"{'kind':<9} {'name':<{width}}  {'max_rel_err':>11}  status"]
    for case, err in results:
        status = "ok" if err <= tolerance else "FAIL"
        lines.append(f"{case.kind:<9} {case.name:<{width}}  {err:11.3e}  {status}")
    return "\n".join(lines)
