"""Two-stage training protocol, evaluation, ablation sweeps and the similarity study."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np
import torch

from .corpus import LabelCorpus, encode_target, ids_to_text, load_labels, make_prompt, tokenize_prompt
from .dualenc import (
    DualEncoder,
    EmbeddingMatrix,
    encode_image_batch,
    encode_prompts,
    freeze,
    load_state_arrays,
    similarity_probe,
    state_arrays,
)
from .model import STRModel
from .perturb import PerturbCache, load_cache, perturb_batch
from .render import DatasetManifest, load_manifest
from .strdec import Decoder, batch_sequence_loss, build_mask, query_visibility
from .tensorio import load_tensors, save_tensors

log = logging.getLogger(__name__)

VARIANT_MASK = {"parseq": "perm", "nrtr": "causal", "cloze": "cloze"}
STAGES = ("dualenc", "decoder", "full")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became non-finite ({loss}) at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    lam: float = 0.1
    L_u: int | None = None  # None -> max_len + 1
    K: int = 3
    variant: str = "parseq"
    merge: str = "fmu"
    lr: float = 1e-3
    batch: int = 16
    epochs: int = 20
    pretrain_epochs: int = 10
    pretrain_batch: int = 32
    seed: int = 0
    freeze_decoder: bool = False
    max_len: int = 12
    dim: int = 64
    heads: int = 4
    enc_layers: int = 3
    dec_layers: int = 2

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.epochs < 1 or self.pretrain_epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch < 1 or self.pretrain_batch < 1:
            raise ValueError("batch must be >= 1")
        if self.variant not in VARIANT_MASK:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.L_u is None:
            self.L_u = self.max_len + 1

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrainConfig":
        data = dict(data)
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# Large-scale reference settings; the toy defaults above differ.
REFERENCE_CONFIG = {
    "lr": 7e-4,
    "weight_decay": 0.0,
    "pretrain_batch": 512,
    "finetune_batch": 384,
    "max_len": 25,
    "L_u": 26,
    "lambda": 0.1,
    "canvas": [32, 128],
    "patch": [4, 8],
    "dim": 512,
    "prompt_tokens": 78,
    "cache_images": 10000,
}


# --- checkpoints ---------------------------------------------------------------


@dataclass
class Checkpoint:
    stage: str
    tensors: dict[str, np.ndarray]
    config: dict[str, Any]
    seed: int
    metrics: dict[str, Any] = field(default_factory=dict)
    dims: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown checkpoint stage {self.stage!r}")
        prefixes = {"dualenc": ("text_blocks.", "image_blocks."), "decoder": ("layers.",), "full": ("encoder.", "decoder.")}
        for p in prefixes[self.stage]:
            if not any(k.startswith(p) for k in self.tensors):
                raise ValueError(f"{self.stage} checkpoint lacks {p}* tensors")

    def save(self, path: str | Path) -> None:
        save_tensors(
            path,
            self.tensors,
            stage=self.stage,
            config=self.config,
            seed=self.seed,
            metrics=self.metrics,
            dims=self.dims,
        )

    def payload_digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.tensors):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.tensors[k], dtype="<f4").tobytes())
        return h.hexdigest()


def load_checkpoint(path: str | Path) -> Checkpoint:
    tensors, header = load_tensors(path)
    return Checkpoint(
        header["stage"], tensors, header.get("config", {}), int(header.get("seed", 0)),
        header.get("metrics", {}), header.get("dims", {}),
    )


def tensor_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in module.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def dualenc_checkpoint(model: DualEncoder, seed: int, metrics: dict | None = None) -> Checkpoint:
    return Checkpoint("dualenc", state_arrays(model), {}, seed, metrics or {}, dict(model.dims))


def dualenc_from_checkpoint(ckpt: Checkpoint) -> DualEncoder:
    if ckpt.stage != "dualenc":
        raise ValueError(f"expected a dualenc checkpoint, got {ckpt.stage}")
    dims = dict(ckpt.dims)
    dims["canvas"] = tuple(dims["canvas"])
    dims["patch"] = tuple(dims["patch"])
    return freeze(load_state_arrays(DualEncoder(**dims), ckpt.tensors))


def _decoder_for(cfg: TrainConfig) -> Decoder:
    return Decoder(cfg.dim, cfg.heads, cfg.dec_layers, cfg.max_len)


def _model_for(cfg: TrainConfig) -> STRModel:
    merge = cfg.merge
    return STRModel(cfg.dim, cfg.heads, cfg.enc_layers, cfg.dec_layers, cfg.max_len, merge, cfg.L_u)


def decoder_from_checkpoint(ckpt: Checkpoint) -> Decoder:
    if ckpt.stage == "decoder":
        cfg = TrainConfig.from_dict(ckpt.config)
        return load_state_arrays(_decoder_for(cfg), ckpt.tensors)
    if ckpt.stage == "full":
        return model_from_checkpoint(ckpt).decoder
    raise ValueError(f"no decoder in a {ckpt.stage} checkpoint")


def model_from_checkpoint(ckpt: Checkpoint) -> STRModel:
    if ckpt.stage != "full":
        raise ValueError(f"expected a full checkpoint, got {ckpt.stage}")
    return load_state_arrays(_model_for(TrainConfig.from_dict(ckpt.config)), ckpt.tensors).eval()


# --- training ------------------------------------------------------------------


def _optimizer(params, lr: float, total_steps: int):
    """Adam under a one-cycle schedule: short warmup to ``lr``, then cosine decay."""
    opt = torch.optim.Adam(params, lr=lr)
    sched = torch.optim.lr_scheduler.OneCycleLR(
        opt, max_lr=lr, total_steps=max(total_steps, 2), pct_start=0.075, cycle_momentum=False
    )
    return opt, sched


def _step(params, optimizer, loss: torch.Tensor, step: int, sched=None) -> float:
    value = float(loss.detach())
    if not np.isfinite(value):
        raise TrainingDiverged(step, value)
    optimizer.zero_grad()
    loss.backward()
    torch.nn.utils.clip_grad_norm_(params, 1.0)
    optimizer.step()
    if sched is not None:
        sched.step()
    return value


def _target_ids(labels: Sequence[str], max_len: int) -> torch.Tensor:
    return torch.tensor([encode_target(lb, max_len).ids for lb in labels], dtype=torch.long)


def _visibles(cfg: TrainConfig, rng: np.random.Generator) -> list[torch.Tensor]:
    masks = build_mask(VARIANT_MASK[cfg.variant], cfg.max_len, cfg.K, rng)
    return [query_visibility(m) for m in masks]


def pretrain_decoder(
    corpus: LabelCorpus,
    text_encoder: DualEncoder,
    cache: PerturbCache | None,
    cfg: TrainConfig,
) -> Checkpoint:
    """Text-only decoder training on (optionally perturbed) frozen prompt features."""
    if any(p.requires_grad for p in text_encoder.parameters()):
        raise ValueError("text encoder must be frozen")
    if cfg.dim != text_encoder.dim:
        raise ValueError(f"decoder dim {cfg.dim} does not match text encoder dim {text_encoder.dim}")
    if cfg.lam > 0 and cache is None:
        raise ValueError("lambda > 0 needs a perturbation cache")
    before = tensor_digest(text_encoder)
    labels = list(corpus.labels)
    feats = encode_prompts(text_encoder, labels)
    targets = _target_ids(labels, cfg.max_len)

    torch.manual_seed(cfg.seed)
    decoder = _decoder_for(cfg)
    per_epoch = -(-len(labels) // cfg.pretrain_batch)
    opt, sched = _optimizer(decoder.parameters(), cfg.lr, per_epoch * cfg.pretrain_epochs)
    rng = np.random.default_rng([cfg.seed, 0x9E7])
    curve = []
    step = 0
    decoder.train()
    for epoch in range(cfg.pretrain_epochs):
        order = rng.permutation(len(labels))
        total, n = 0.0, 0
        for i in range(0, len(order), cfg.pretrain_batch):
            idx = torch.as_tensor(order[i : i + cfg.pretrain_batch])
            memory = feats[idx]
            if cache is not None:
                memory = perturb_batch(memory, cache, cfg.lam, rng)
            tgt = targets[idx]
            logits = [decoder(memory, tgt[:, :-1], vis) for vis in _visibles(cfg, rng)]
            loss = batch_sequence_loss(logits, tgt[:, 1:])
            total += _step(decoder.parameters(), opt, loss, step, sched) * len(idx)
            n += len(idx)
            step += 1
        curve.append(total / n)
        log.info("pretrain epoch %d loss %.4f", epoch, curve[-1])
    if tensor_digest(text_encoder) != before:
        raise RuntimeError("text encoder tensors changed during decoder pre-training")
    metrics = {"loss_curve": curve, "final_loss": curve[-1], "steps": step, "source": "text"}
    return Checkpoint("decoder", state_arrays(decoder), cfg.to_dict(), cfg.seed, metrics, decoder.dims)


def _load_split(manifest: DatasetManifest, split: str, max_len: int):
    entries = manifest.split(split)
    if not entries:
        raise ValueError(f"split {split!r} is empty")
    images = torch.as_tensor(manifest.load_images(entries))
    return entries, images, _target_ids([e.label for e in entries], max_len)


def finetune(manifest: DatasetManifest, decoder_ckpt: Checkpoint | None, cfg: TrainConfig) -> Checkpoint:
    """Train encoder + merge from scratch; decoder from ``decoder_ckpt`` (or random)."""
    _, images, targets = _load_split(manifest, "train", cfg.max_len)
    torch.manual_seed(cfg.seed)
    model = _model_for(cfg)
    if decoder_ckpt is not None:
        model.decoder.load_state_dict(decoder_from_checkpoint(decoder_ckpt).state_dict())
    if cfg.freeze_decoder:
        if decoder_ckpt is None:
            log.warning("freezing a randomly initialised decoder")
        for p in model.decoder.parameters():
            p.requires_grad_(False)
    frozen_digest = tensor_digest(model.decoder) if cfg.freeze_decoder else None
    params = [p for p in model.parameters() if p.requires_grad]
    opt, sched = _optimizer(params, cfg.lr, -(-len(images) // cfg.batch) * cfg.epochs)
    rng = np.random.default_rng([cfg.seed, 0xF1E])
    curve = []
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(images))
        total, n = 0.0, 0
        for i in range(0, len(order), cfg.batch):
            idx = torch.as_tensor(order[i : i + cfg.batch])
            tgt = targets[idx]
            memory = model.memory(images[idx])
            logits = [model.decoder(memory, tgt[:, :-1], vis) for vis in _visibles(cfg, rng)]
            loss = batch_sequence_loss(logits, tgt[:, 1:])
            total += _step(params, opt, loss, step, sched) * len(idx)
            n += len(idx)
            step += 1
        curve.append(total / n)
        log.info("finetune epoch %d loss %.4f", epoch, curve[-1])
    if frozen_digest is not None and tensor_digest(model.decoder) != frozen_digest:
        raise RuntimeError("frozen decoder tensors changed during fine-tuning")
    metrics = {
        "loss_curve": curve,
        "final_loss": curve[-1],
        "steps": step,
        "pretrained": None if decoder_ckpt is None else decoder_ckpt.metrics.get("source", "text"),
    }
    model.eval()
    return Checkpoint("full", state_arrays(model), cfg.to_dict(), cfg.seed, metrics, {})


def decoder_only(ckpt: Checkpoint, source: str) -> Checkpoint:
    """Extract the decoder of a full checkpoint as a decoder-stage checkpoint."""
    decoder = decoder_from_checkpoint(ckpt)
    metrics = {"source": source, "final_loss": ckpt.metrics.get("final_loss")}
    return Checkpoint("decoder", state_arrays(decoder), ckpt.config, ckpt.seed, metrics, decoder.dims)


def pretrain_on_images(manifest: DatasetManifest, cfg: TrainConfig) -> Checkpoint:
    """The image-based comparison arm: train a full model on ``manifest`` and keep its decoder."""
    full = finetune(manifest, None, cfg.replace(epochs=cfg.pretrain_epochs, freeze_decoder=False))
    return decoder_only(full, "synth")


# --- evaluation ----------------------------------------------------------------


@dataclass
class EvalReport:
    split: str
    correct: int
    total: int
    config_hash: str
    predictions: list[dict[str, Any]] = field(default_factory=list, repr=False)

    @property
    def accuracy(self) -> float:
        return self.correct / self.total

    def summary(self) -> dict[str, Any]:
        return {
            "split": self.split,
            "accuracy": self.accuracy,
            "correct": self.correct,
            "total": self.total,
            "config_hash": self.config_hash,
        }

    def write_predictions(self, path: str | Path) -> None:
        text = "".join(json.dumps(p, sort_keys=True) + "\n" for p in self.predictions)
        _atomic_text(Path(path), text)


def evaluate(ckpt: Checkpoint, manifest: DatasetManifest, split: str = "test", batch: int = 256) -> EvalReport:
    entries = manifest.split(split)
    if not entries:
        raise ValueError(f"split {split!r} is empty")
    model = model_from_checkpoint(ckpt)
    cfg = TrainConfig.from_dict(ckpt.config)
    kind = VARIANT_MASK[cfg.variant]
    preds = []
    for i in range(0, len(entries), batch):
        chunk = entries[i : i + batch]
        images = torch.as_tensor(manifest.load_images(chunk))
        preds += [ids_to_text(ids) for ids in model.recognize(images, kind)]
    rows = [
        {"path": e.path, "label": e.label, "prediction": p, "correct": p.lower() == e.label.lower()}
        for e, p in zip(entries, preds)
    ]
    correct = sum(r["correct"] for r in rows)
    return EvalReport(split, correct, len(rows), cfg.hash(), rows)


# --- lab resources and ablations -----------------------------------------------


@dataclass
class LabSpec:
    per_label: int = 4
    split_frac: float = 0.9
    strength: float = 0.3
    photos: int = 256
    cache_count: int = 256
    dualenc_steps: int = 1500
    dualenc_batch: int = 64
    dualenc_lr: float = 1e-3
    seed: int = 0


@dataclass
class Lab:
    """Everything the protocol needs: corpus, frozen dual encoder, cache and datasets."""

    corpus: LabelCorpus
    text_encoder: DualEncoder
    cache: PerturbCache
    manifest: DatasetManifest
    clean_manifest: DatasetManifest | None = None
    _pretrained: dict = field(default_factory=dict, repr=False)
    _runs: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_dir(cls, root: str | Path, max_len: int = 12) -> "Lab":
        root = Path(root)
        clean = root / "clean" / "manifest.jsonl"
        return cls(
            corpus=load_labels(root / "labels.txt", max_len),
            text_encoder=dualenc_from_checkpoint(load_checkpoint(root / "dualenc.ckpt")),
            cache=load_cache(root / "cache.bin"),
            manifest=load_manifest(root / "cluttered" / "manifest.jsonl"),
            clean_manifest=load_manifest(clean) if clean.exists() else None,
        )

    @classmethod
    def build(cls, root: str | Path, spec: LabSpec | None = None, corpus: LabelCorpus | None = None) -> "Lab":
        """Render datasets and photos, train the dual encoder on cluttered train images, build the cache.

        Everything is written under ``root`` in the layout :meth:`from_dir` reads.
        """
        from .corpus import dedup_and_load, toy_wordlist
        from .perturb import build_cache
        from .render import build_dataset, make_photo
        from .dualenc import train_dual_encoder

        spec = spec or LabSpec()
        root = Path(root)
        corpus = corpus or dedup_and_load(toy_wordlist())
        _atomic_text(root / "labels.txt", "\n".join(corpus.labels) + "\n")
        clut = build_dataset(corpus, spec.per_label, "cluttered", spec.split_frac, spec.seed, root / "cluttered",
                             strength=spec.strength)
        clean = build_dataset(corpus, spec.per_label, "clean", spec.split_frac, spec.seed, root / "clean")
        train = clut.split("train")
        model, losses = train_dual_encoder(
            clut.load_images(train), [e.label for e in train],
            steps=spec.dualenc_steps, batch=spec.dualenc_batch, seed=spec.seed, lr=spec.dualenc_lr,
        )
        dualenc_checkpoint(model, spec.seed, {"loss_curve": losses, "final_loss": losses[-1]}).save(
            root / "dualenc.ckpt"
        )
        photos = np.stack([make_photo(rng=np.random.SeedSequence([spec.seed, 0xF070, i])).pixels
                           for i in range(spec.photos)])
        cache = build_cache(photos, model, spec.cache_count, spec.seed)
        cache.save(root / "cache.bin")
        return cls(corpus, model, cache, clut, clean)

    def pretrained(self, cfg: TrainConfig, source: str = "text") -> Checkpoint:
        """Memoised pre-trained decoder for (source, pre-training settings, seed)."""
        key = (
            source, cfg.lam, cfg.seed, cfg.variant, cfg.K, cfg.pretrain_epochs, cfg.pretrain_batch,
            cfg.lr, cfg.dim, cfg.heads, cfg.dec_layers, cfg.max_len,
        )
        if source == "synth":
            key += (cfg.enc_layers, cfg.merge, cfg.L_u, cfg.batch)
        if key not in self._pretrained:
            if source == "text":
                self._pretrained[key] = pretrain_decoder(self.corpus, self.text_encoder, self.cache, cfg)
            elif source == "synth":
                if self.clean_manifest is None:
                    raise ValueError("synth pre-training needs a clean-domain manifest")
                self._pretrained[key] = pretrain_on_images(self.clean_manifest, cfg)
            else:
                raise ValueError(f"unknown pre-training source {source!r}")
        return self._pretrained[key]

    def finetuned(self, cfg: TrainConfig, source: str | None = "text") -> Checkpoint:
        """Memoised fine-tuned checkpoint for (config, source)."""
        key = (cfg.hash(), source)
        if key not in self._runs:
            dec = None if source is None else self.pretrained(cfg, source)
            self._runs[key] = (finetune(self.manifest, dec, cfg), {})
        return self._runs[key][0]

    def run(self, cfg: TrainConfig, source: str | None = "text", splits: Sequence[str] = ("test",)) -> dict[str, float]:
        """Pre-train (unless ``source`` is None), fine-tune, evaluate; returns split accuracies.

        Results are memoised per (config, source), so sweeps sharing a grid point reuse it.
        """
        full = self.finetuned(cfg, source)
        accs = self._runs[(cfg.hash(), source)][1]
        for s in splits:
            if s not in accs:
                accs[s] = evaluate(full, self.manifest, s).accuracy
        return {s: accs[s] for s in splits}


ABLATION_KINDS = ("lambda", "L_u", "merge", "pretrain_source")
PRETRAIN_SOURCES = {
    "base": (None, False),
    "synth_freeze": ("synth", True),
    "synth": ("synth", False),
    "dptr_freeze": ("text", True),
    "dptr": ("text", False),
}


def grid_point(kind: str, setting, base: TrainConfig) -> tuple[TrainConfig, str | None]:
    if kind == "lambda":
        return base.replace(lam=float(setting)), "text"
    if kind == "L_u":
        if setting in ("w/o", "none", None):
            return base.replace(merge="none"), "text"
        return base.replace(merge="fmu", L_u=int(setting)), "text"
    if kind == "merge":
        return base.replace(merge=str(setting)), "text"
    if kind == "pretrain_source":
        source, freeze_dec = PRETRAIN_SOURCES[str(setting)]
        return base.replace(freeze_decoder=freeze_dec), source
    raise ValueError(f"unknown ablation kind {kind!r}")


def run_ablation(
    kind: str,
    grid: Sequence,
    base_cfg: TrainConfig,
    lab: Lab,
    seeds: Sequence[int] = (0, 1, 2),
    splits: Sequence[str] = ("test",),
    on_row: Callable[[dict], None] | None = None,
) -> list[dict[str, Any]]:
    """One pretrain/finetune/evaluate run per (grid point, seed); failures are recorded, not raised."""
    if not grid:
        raise ValueError("empty ablation grid")
    rows = []
    for setting in grid:
        for seed in seeds:
            row: dict[str, Any] = {"kind": kind, "setting": str(setting), "seed": seed}
            try:
                cfg, source = grid_point(kind, setting, base_cfg.replace(seed=seed))
                accs = lab.run(cfg, source, splits)
                row.update({f"acc_{s}": accs[s] for s in splits})
                row["status"] = "ok"
            except Exception as exc:  # noqa: BLE001 - a failed point must not stop the sweep
                log.warning("ablation point %s=%s seed %s failed: %s", kind, setting, seed, exc)
                row.update({f"acc_{s}": float("nan") for s in splits})
                row["status"] = f"error: {exc}"
            rows.append(row)
            if on_row:
                on_row(row)
    for row in rows:
        vals = [r[f"acc_{splits[0]}"] for r in rows if r["setting"] == row["setting"] and r["status"] == "ok"]
        row["mean"] = float(np.mean(vals)) if vals else float("nan")
    return rows


def ablation_csv(rows: Sequence[dict[str, Any]]) -> str:
    if not rows:
        return ""
    cols = ["kind", "setting", "seed"] + sorted(k for k in rows[0] if k.startswith("acc_")) + ["mean", "status"]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: r.get(k) for k in cols})
    return buf.getvalue()


def setting_means(rows: Iterable[dict[str, Any]], split: str = "test") -> dict[str, float]:
    out: dict[str, list[float]] = {}
    for r in rows:
        if r["status"] == "ok":
            out.setdefault(r["setting"], []).append(r[f"acc_{split}"])
    return {k: float(np.mean(v)) for k, v in out.items()}


# --- similarity study ------------------------------------------------------------


@dataclass
class SimilarityStudy:
    fraction: float
    n_labels: int
    skipped: int
    scores: dict[str, float]
    histogram: list[tuple[float, float, int]]

    def histogram_csv(self) -> str:
        buf = io.StringIO()
        buf.write("bin_lo,bin_hi,count\n")
        for lo, hi, c in self.histogram:
            buf.write(f"{lo:.2f},{hi:.2f},{c}\n")
        return buf.getvalue()


def similarity_study(
    corpus: LabelCorpus,
    clean_manifest: DatasetManifest,
    cluttered_manifest: DatasetManifest,
    dualenc: DualEncoder,
    normalize: bool = False,
    bins: int = 20,
) -> SimilarityStudy:
    """Per label: softmax over summed prompt/image similarities of clean vs cluttered images."""
    budget = dualenc.dims["prompt_budget"]
    by_label: dict[str, dict[str, list]] = {}
    for man, dom in ((clean_manifest, "clean"), (cluttered_manifest, "cluttered")):
        emb = encode_image_batch(dualenc, man.load_images())
        for e, row in zip(man.entries, emb):
            by_label.setdefault(e.label, {"clean": [], "cluttered": []})[dom].append(row)

    labels = list(corpus.labels)
    feats = encode_prompts(dualenc, labels)
    scores: dict[str, float] = {}
    skipped = 0
    for label, f in zip(labels, feats):
        groups = by_label.get(label)
        if not groups or not groups["clean"] or not groups["cluttered"]:
            skipped += 1
            continue
        text = EmbeddingMatrix(f, "prompt", special=budget)
        images = [EmbeddingMatrix(v, "image", special=0) for v in groups["clean"] + groups["cluttered"]]
        tags = ["clean"] * len(groups["clean"]) + ["cluttered"] * len(groups["cluttered"])
        scores[label] = similarity_probe(text, images, tags, normalize=normalize)["cluttered"]
    if not scores:
        raise ValueError("no label has images in both domains")
    vals = np.array(list(scores.values()))
    counts, edges = np.histogram(vals, bins=bins, range=(0.0, 1.0))
    hist = [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(bins)]
    return SimilarityStudy(float((vals > 0.5).mean()), len(scores), skipped, scores, hist)


def _atomic_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)
