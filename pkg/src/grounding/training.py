"""Mini-batch SGD over synthetic scenes with discriminative and structural losses."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import losses
from .losses import Hyperparams, LossBreakdown, NonFiniteLossError
from .model import LANGUAGE_PREFIX, GroundingModel, ModelConfig, embed_rows
from .model import embed_locations, encode_image, encode_phrases, mask_logits, pool_and_embed
from .scenes import SceneSample, read_dataset
from .trees import build_grounding_tree, parse_sexpr

logger = logging.getLogger(__name__)

ABLATIONS = ("token", "disc", "pc", "sib", "full")
COLLAPSE_SPREAD = 0.01


@dataclass
class TrainConfig:
    image_size: int = 80
    delta: int = 4
    widths: tuple[int, ...] = (8, 16, 32)
    embed_width: int = 32
    embed_hidden: int = 32
    embed_activation: str = "linear"
    lambda_pc: float = 0.01
    lambda_sib: float = 0.0001
    lr: float = 0.05
    batch_size: int = 8
    epochs: int = 30
    seed: int = 0
    ablation: str = "full"
    disc_loss: str = "printed"
    freeze_language_encoder: bool = False
    negatives_per_image: int | None = None
    dropout: float = 0.0
    clip_norm: float = 5.0
    checkpoint_every: int = 0
    structural_language_grad: bool = False
    noun_leaves: bool = False
    single_child_pairs: bool = True

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")
        if self.disc_loss not in losses.DISC_MODES:
            raise ValueError(f"unknown disc-loss {self.disc_loss!r}; expected one of {losses.DISC_MODES}")
        if self.delta not in (1, 2, 4, 8):
            raise ValueError(f"delta must be 1, 2, 4 or 8, got {self.delta}")
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != 3:
            raise ValueError("widths needs three conv channel counts")
        self.hyperparams()  # validates lambdas

    def model_config(self) -> ModelConfig:
        halvings = int(math.log2(self.delta))
        strides = tuple(2 if i < halvings else 1 for i in range(3))
        return ModelConfig(
            image_size=self.image_size,
            conv_widths=self.widths,
            conv_strides=strides,
            embed_hidden=self.embed_hidden,
            embed_activation=self.embed_activation,
            width=self.embed_width,
            token_dim=self.embed_width,
            dropout=self.dropout,
            seed=self.seed,
        )

    def hyperparams(self) -> Hyperparams:
        lam_pc, lam_sib = self.lambda_pc, self.lambda_sib
        if self.ablation in ("token", "disc"):
            lam_pc = lam_sib = 0.0
        elif self.ablation == "pc":
            lam_sib = 0.0
        elif self.ablation == "sib":
            lam_pc = 0.0
        return Hyperparams(lam_pc, lam_sib, self.lr, self.batch_size, self.negatives_per_image, self.seed)

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected 'key = value', got {line!r}")
            key, _, value = (s.strip() for s in line.partition("="))
            name = key.replace("-", "_")
            if name not in known:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            kwargs[name] = _parse_value(name, value)
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kwargs)

    @classmethod
    def load(cls, path, **overrides) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read(), **overrides)

    def to_text(self) -> str:
        out = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(map(str, value))
            elif value is None:
                continue
            elif isinstance(value, bool):
                value = str(value).lower()
            out.append(f"{f.name.replace('_', '-')} = {value}")
        return "\n".join(out) + "\n"


BOOL_KEYS = ("freeze_language_encoder", "structural_language_grad", "noun_leaves", "single_child_pairs")


def _parse_value(name: str, value: str):
    if name == "widths":
        return tuple(int(v) for v in value.split(","))
    if name in ("ablation", "disc_loss", "embed_activation"):
        return value
    if name in BOOL_KEYS:
        if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{name.replace('_', '-')}: expected a boolean, got {value!r}")
        return value.lower() in ("true", "1", "yes")
    if name in ("lambda_pc", "lambda_sib", "lr", "dropout", "clip_norm"):
        return float(value)
    return int(value)


# ------------------------------------------------------------------ batches


@dataclass
class Example:
    sample: SceneSample
    positives: list[tuple[str, ...]]
    pc_pairs: list[tuple[int, tuple[int, ...]]] = field(default_factory=list)
    sibling_sets: list[tuple[int, ...]] = field(default_factory=list)


def prepare(
    samples: Sequence[SceneSample],
    ablation: str = "full",
    noun_leaves: bool = False,
    single_child_pairs: bool = True,
) -> list[Example]:
    """Positive phrases and constraint sets (as indices into positives) per scene.

    The ``token`` ablation always uses the noun leaves; the other presets
    include them as grounding nodes only when ``noun_leaves`` is set.
    """
    out = []
    for s in samples:
        tree = build_grounding_tree(
            parse_sexpr(s.parse),
            include_leaves=noun_leaves or ablation == "token",
            single_child_pairs=single_child_pairs,
        )
        if ablation == "token":
            out.append(Example(s, [tree.phrases[v] for v in tree.noun_leaves()]))
            continue
        index = {v: i for i, v in enumerate(tree.valid)}
        positives = [tree.phrases[v] for v in tree.valid]
        pcs = [(index[pc.parent], tuple(index[c] for c in pc.children)) for pc in tree.pc_pairs]
        sibs = [tuple(index[m] for m in ss.members) for ss in tree.sibling_sets]
        out.append(Example(s, positives, pcs, sibs))
    return out


def phrase_pool(examples: Sequence[Example]) -> list[tuple[str, ...]]:
    return sorted({p for ex in examples for p in ex.positives})


@dataclass
class Batch:
    images: np.ndarray
    phrases: list[tuple[str, ...]]
    pairs: np.ndarray  # (M, 2) image index, phrase index
    labels: np.ndarray  # (M,) in {-1, +1}
    positives: list[list[int]]  # per image: phrase indices of its own positives
    pc_pairs: list[list[tuple[int, tuple[int, ...]]]]
    sibling_sets: list[list[tuple[int, ...]]]


def make_batch(examples, indices, rng, h: Hyperparams, pool=None) -> Batch:
    if pool is None:
        pool = phrase_pool(examples)
    phrases: list[tuple[str, ...]] = []
    slot: dict[tuple[str, ...], int] = {}

    def intern(ph):
        if ph not in slot:
            slot[ph] = len(phrases)
            phrases.append(ph)
        return slot[ph]

    pairs, labels, own, pcs, sibs = [], [], [], [], []
    for b, i in enumerate(indices):
        ex = examples[i]
        ids = [intern(ph) for ph in ex.positives]
        own.append(ids)
        pcs.append([(ids[k], tuple(ids[c] for c in kids)) for k, kids in ex.pc_pairs])
        sibs.append([tuple(ids[m] for m in members) for members in ex.sibling_sets])
        for u in ids:
            pairs.append((b, u))
            labels.append(1.0)
        want = len(ex.positives) if h.negatives_per_image is None else h.negatives_per_image
        if want:
            taken = set(ex.positives)
            if taken.issuperset(pool):
                raise ValueError("no negative phrases available: every phrase belongs to this image")
            drawn = 0
            while drawn < want:
                ph = pool[int(rng.integers(len(pool)))]
                if ph in taken:
                    continue
                pairs.append((b, intern(ph)))
                labels.append(-1.0)
                drawn += 1
    images = np.stack([examples[i].sample.image for i in indices])
    return Batch(images, phrases, np.array(pairs, dtype=np.intp).reshape(-1, 2), np.array(labels), own, pcs, sibs)


def sample_batch(examples, rng, h: Hyperparams, pool=None) -> Batch:
    """``batch_size`` distinct images plus positives and sampled negatives."""
    if len(examples) < 2:
        raise ValueError("need at least 2 images: negatives come from other images")
    k = min(h.batch_size, len(examples))
    indices = rng.choice(len(examples), size=k, replace=False)
    return make_batch(examples, [int(i) for i in indices], rng, h, pool)


# --------------------------------------------------------------------- step


def _structural(masks, batch: Batch, row_of) -> tuple:
    """Batch-mean L_PC and L_SIB from per-(image, phrase) mask rows."""
    n = len(batch.positives)
    l_pc = l_sib = None
    for b in range(n):
        pcs = batch.pc_pairs[b]
        if pcs:
            term = None
            for parent, kids in pcs:
                t = losses.loss_pc(row_of(masks, b, parent), [row_of(masks, b, c) for c in kids], len(pcs))
                term = t if term is None else term + t
            l_pc = term if l_pc is None else l_pc + term
        sibs = batch.sibling_sets[b]
        if sibs:
            term = losses.loss_sib([[row_of(masks, b, m) for m in members] for members in sibs], len(sibs))
            l_sib = term if l_sib is None else l_sib + term
    zero = ad.Tensor(0.0)
    l_pc = zero if l_pc is None else l_pc * (1.0 / n)
    l_sib = zero if l_sib is None else l_sib * (1.0 / n)
    return l_pc, l_sib


def forward_losses(
    model: GroundingModel,
    batch: Batch,
    h: Hyperparams,
    p,
    disc_mode="printed",
    rng=None,
    structural_language_grad: bool = False,
):
    """Build the full loss graph; returns (L, L_PC, L_SIB, L_disc, codes).

    Unless ``structural_language_grad`` is set, phrase codes enter the
    structural losses as constants, so only the discriminative loss trains
    the language encoder.
    """
    cfg = model.config
    feats = encode_image(batch.images, p, cfg, rng)
    if len(batch.images) >= 2:
        phi_v, stats = pool_and_embed(feats, p, cfg, rng=rng)
    else:
        phi_v, stats = pool_and_embed(feats, p, cfg, model.inference_stats(), rng=rng)
    codes = encode_phrases(model, batch.phrases, p, rng)
    u = len(batch.phrases)
    logits = (phi_v @ codes.T).reshape(-1)
    flat = batch.pairs[:, 0] * u + batch.pairs[:, 1]
    l_disc = losses.batch_disc_loss(ad.take(logits, flat), batch.labels, disc_mode)

    needed = sorted({(b, k) for b in range(len(batch.positives)) for k in batch.positives[b]})
    has_struct = any(batch.pc_pairs) or any(batch.sibling_sets)
    if not has_struct:
        zero = ad.Tensor(0.0)
        return losses.combine(zero, zero, l_disc, h), zero, zero, l_disc, codes
    loc = embed_locations(feats, p, cfg, stats, rng)
    n, grid = loc.shape[0], loc.shape[1]
    rows = np.array([b * u + k for b, k in needed], dtype=np.intp)
    position = {key: j for j, key in enumerate(needed)}
    if h.lambda_pc == 0 and h.lambda_sib == 0:
        # values are reported but carry no gradient
        loc, codes_c = ad.Tensor(loc.data), ad.Tensor(codes.data)
    elif structural_language_grad:
        codes_c = codes
    else:
        codes_c = ad.Tensor(codes.data)
    masks = ad.sigmoid(ad.take(mask_logits(loc, codes_c).reshape(n * u, grid), rows))

    def row_of(m, b, k):
        return ad.take(m, [position[(b, k)]])

    l_pc, l_sib = _structural(masks, batch, row_of)
    return losses.combine(l_pc, l_sib, l_disc, h), l_pc, l_sib, l_disc, codes


def cosine_spread(codes: np.ndarray) -> float:
    """max - min pairwise cosine similarity among phrase codes."""
    if len(codes) < 2:
        return float("inf")
    norms = np.linalg.norm(codes, axis=1, keepdims=True)
    unit = codes / np.maximum(norms, 1e-12)
    cos = unit @ unit.T
    off = cos[~np.eye(len(codes), dtype=bool)]
    return float(off.max() - off.min())


def train_step(
    model: GroundingModel,
    batch: Batch,
    h: Hyperparams,
    *,
    disc_mode: str = "printed",
    freeze_language: bool = False,
    clip_norm: float | None = 5.0,
    structural_language_grad: bool = False,
    rng=None,
) -> tuple[GroundingModel, LossBreakdown]:
    """One SGD update in place; returns the model and the step's loss breakdown."""
    tape = ad.Tape()
    p = {}
    for name, value in model.params.items():
        frozen = freeze_language and name.startswith(LANGUAGE_PREFIX)
        p[name] = ad.Tensor(value) if frozen else tape.watch(value)
    total, l_pc, l_sib, l_disc, codes = forward_losses(
        model, batch, h, p, disc_mode, rng, structural_language_grad
    )
    breakdown = losses.total_loss(l_pc, l_sib, l_disc, h)
    if not math.isfinite(breakdown.L):
        raise NonFiniteLossError("L", breakdown.L)
    spread = cosine_spread(codes.data)
    if spread < COLLAPSE_SPREAD:
        logger.warning("phrase codes collapsing: pairwise cosine spread %.4g < %.2g", spread, COLLAPSE_SPREAD)
    grads = ad.backward(total)
    trainable = [k for k, t in p.items() if t.node is not None]
    gs = {k: grads.of(p[k]) for k in trainable}
    factor = 1.0
    if clip_norm:
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in gs.values()))
        if not math.isfinite(norm):
            raise NonFiniteLossError("gradient", norm)
        if norm > clip_norm:
            factor = clip_norm / norm
    step = h.lr * factor
    if step != 0.0:
        for k in trainable:
            model.params[k] = model.params[k] - step * gs[k]
    return model, breakdown


# --------------------------------------------------------------------- loop


def calibrate_normalization(model: GroundingModel, images: np.ndarray, chunk: int = 64) -> None:
    """Set inference statistics of the embedding normalisation to the population
    mean/variance of pooled pre-normalisation codes over ``images``."""
    cfg = model.config
    p = model.bind()
    pres = []
    for start in range(0, len(images), chunk):
        feats = encode_image(images[start:start + chunk], p, cfg)
        pres.append(embed_rows(ad.avgpool(feats), p, cfg).data)
    pre = np.concatenate(pres)
    model.norm_mean = pre.mean(axis=0)
    model.norm_var = pre.var(axis=0)


def all_tokens(samples: Sequence[SceneSample]) -> set[str]:
    return {t.lower() for s in samples for t in s.caption}


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng((seed, 1, epoch)).permutation(n)


def _step_rng(seed: int, step: int):
    return np.random.default_rng((seed, 2, step))


def steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


@dataclass
class TrainResult:
    model: GroundingModel
    log: list[tuple[int, LossBreakdown]]


def train(
    config: TrainConfig,
    samples: Sequence[SceneSample],
    out_path=None,
    log_path=None,
    checkpoint_dir=None,
    resume_from=None,
) -> TrainResult:
    """Run ``config.epochs`` epochs of SGD and optionally write the model and CSV log."""
    h = config.hyperparams()
    examples = prepare(samples, config.ablation, config.noun_leaves, config.single_child_pairs)
    if len(examples) < 2:
        raise ValueError("need at least 2 training scenes")
    pool = phrase_pool(examples)
    images = np.stack([s.image for s in samples])
    start_step = 0
    if resume_from is not None:
        model = GroundingModel.load(resume_from)
        with open(str(resume_from) + ".json", encoding="utf-8") as fh:
            start_step = json.load(fh)["step"]
    else:
        model = GroundingModel.create(config.model_config(), all_tokens(samples))
    per_epoch = steps_per_epoch(len(examples), h.batch_size)
    log: list[tuple[int, LossBreakdown]] = []
    log_fh = None
    if log_path is not None:
        log_fh = open(log_path, "a" if resume_from is not None else "w", encoding="utf-8")
        if resume_from is None:
            log_fh.write(losses.CSV_HEADER + "\n")
    try:
        step = 0
        for epoch in range(config.epochs):
            order = _epoch_order(config.seed, epoch, len(examples))
            for j in range(per_epoch):
                if step < start_step:
                    step += 1
                    continue
                rng = _step_rng(config.seed, step)
                idx = [int(i) for i in order[j * h.batch_size:(j + 1) * h.batch_size]]
                batch = make_batch(examples, idx, rng, h, pool)
                dropout_rng = rng if config.dropout > 0 else None
                model, breakdown = train_step(
                    model, batch, h,
                    disc_mode=config.disc_loss,
                    freeze_language=config.freeze_language_encoder,
                    clip_norm=config.clip_norm,
                    structural_language_grad=config.structural_language_grad,
                    rng=dropout_rng,
                )
                step += 1
                log.append((step, breakdown))
                if log_fh is not None:
                    log_fh.write(losses.csv_line(step, breakdown) + "\n")
                if config.checkpoint_every and checkpoint_dir is not None and step % config.checkpoint_every == 0:
                    calibrate_normalization(model, images)
                    save_checkpoint(model, step, Path(checkpoint_dir) / f"ckpt-{step:06d}.bin")
            logger.info("epoch %d done, step %d, last L %.5f", epoch + 1, step, log[-1][1].L if log else float("nan"))
    finally:
        if log_fh is not None:
            log_fh.close()
    calibrate_normalization(model, images)
    if out_path is not None:
        model.save(out_path)
    return TrainResult(model, log)


def save_checkpoint(model: GroundingModel, step: int, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    model.save(path)
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump({"step": step}, fh)


def train_from_dir(config: TrainConfig, data_dir, **kwargs) -> TrainResult:
    return train(config, read_dataset(data_dir), **kwargs)
