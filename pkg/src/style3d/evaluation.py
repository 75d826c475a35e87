"""Quantitative scoring of stylized view sets.

Two numbers per case: text-image alignment (how well the rendered views
match a style prompt) and image-image fidelity (how much of the content
reference survives), both as mean cosine similarity in an embedding
space. The embedding model is injectable behind a tiny protocol; the
default is a deterministic hand-crafted stub that maps color words and
image color statistics into one shared space, good enough to rank a red
render against a red caption and requiring no downloads. A real CLIP
checkpoint can be loaded explicitly and fails loudly when unavailable,
never silently downgrading to the stub.

Reports persist as JSON plus CSV with fixed six-decimal floats and stable
key order, so an identical manifest and embedder give identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from typing import Iterable, Optional, Protocol, Sequence, Union

import numpy as np
import torch

from .errors import BackendError, EvalError
from .imgio import load_image

COLOR_ANCHORS = {
    "red": (1.0, 0.1, 0.1),
    "green": (0.1, 0.8, 0.1),
    "blue": (0.1, 0.2, 1.0),
    "yellow": (1.0, 0.9, 0.1),
    "cyan": (0.1, 0.9, 0.9),
    "magenta": (0.9, 0.1, 0.9),
    "orange": (1.0, 0.55, 0.1),
    "purple": (0.55, 0.15, 0.7),
    "pink": (1.0, 0.6, 0.75),
    "brown": (0.6, 0.4, 0.2),
    "white": (0.95, 0.95, 0.95),
    "black": (0.05, 0.05, 0.05),
    "gray": (0.5, 0.5, 0.5),
    "grey": (0.5, 0.5, 0.5),
    "gold": (0.85, 0.7, 0.2),
    "golden": (0.85, 0.7, 0.2),
    "silver": (0.75, 0.75, 0.78),
}
DETAIL_UP = {"detailed", "intricate", "ornate", "textured", "busy", "noisy"}
DETAIL_DOWN = {"flat", "plain", "smooth", "minimal", "simple", "clean"}


class Embedder(Protocol):
    """Shared text/image embedding space. Vectors need not be normalized;
    scores are cosine similarities."""

    name: str

    def embed_text(self, text: str) -> torch.Tensor: ...

    def embed_image(self, image) -> torch.Tensor: ...


def _as_float_image(image) -> torch.Tensor:
    if isinstance(image, np.ndarray):
        image = torch.from_numpy(np.ascontiguousarray(image))
    if image.ndim != 3 or image.shape[-1] != 3:
        raise EvalError(f"expected an (H, W, 3) image, got {tuple(image.shape)}")
    image = image.detach().to(torch.float32)
    if float(image.max()) > 1.5:
        image = image / 255.0
    return image.clamp(0.0, 1.0)


class StubEmbedder:
    """Deterministic eight-dimensional embedder.

    Images map to (mean rgb, brightness, colorfulness, edge density,
    constant anchor, 0); text maps color words to rgb anchors and detail
    words to the edge slot, with a small hashed residual for the
    remaining words. The constant slot keeps every embedding nonzero, so
    cosines are always defined.
    """

    name = "stub-v1"
    dim = 8

    def embed_text(self, text: str) -> torch.Tensor:
        if not text or not text.strip():
            raise EvalError("empty prompt cannot be embedded")
        words = [w.strip(".,;:!?\"'()") for w in text.lower().split()]
        anchors = [COLOR_ANCHORS[w] for w in words if w in COLOR_ANCHORS]
        if anchors:
            rgb = torch.tensor(anchors, dtype=torch.float32).mean(dim=0)
        else:
            rgb = torch.tensor([0.5, 0.5, 0.5])
        detail = 0.5
        if any(w in DETAIL_UP for w in words):
            detail = 1.0
        elif any(w in DETAIL_DOWN for w in words):
            detail = 0.0
        rest = sorted(set(w for w in words if w and w not in COLOR_ANCHORS))
        digest = hashlib.sha256(" ".join(rest).encode("utf-8")).digest()
        residual = (digest[0] / 255.0 - 0.5) * 0.2
        e = torch.empty(self.dim)
        e[0:3] = rgb
        e[3] = rgb.mean()
        e[4] = rgb.std(unbiased=False)
        e[5] = detail
        e[6] = 0.5
        e[7] = residual
        return e / e.norm().clamp_min(1e-12)

    def embed_image(self, image) -> torch.Tensor:
        img = _as_float_image(image)
        rgb = img.mean(dim=(0, 1))
        gray = img.mean(dim=-1)
        gx = (gray[:, 1:] - gray[:, :-1]).abs().mean() if gray.shape[1] > 1 else gray.new_zeros(())
        gy = (gray[1:, :] - gray[:-1, :]).abs().mean() if gray.shape[0] > 1 else gray.new_zeros(())
        detail = (2.0 * (gx + gy)).clamp(0.0, 1.0)
        e = torch.empty(self.dim)
        e[0:3] = rgb
        e[3] = rgb.mean()
        e[4] = rgb.std(unbiased=False)
        e[5] = detail
        e[6] = 0.5
        e[7] = 0.0
        return e / e.norm().clamp_min(1e-12)


def load_clip_embedder(weights_path: Optional[str] = None):
    """Wrap a locally cached CLIP checkpoint as an Embedder.

    Raises BackendError when the model stack or the weights are missing;
    there is deliberately no fallback to the stub, a scored report must
    say which embedder produced it.
    """
    source = weights_path or os.environ.get("STYLE3D_CACHE")
    if not source:
        raise BackendError(
            "no CLIP weights configured: pass weights_path or set STYLE3D_CACHE"
        )
    try:
        from transformers import CLIPModel, CLIPProcessor
    except ImportError as exc:
        raise BackendError(f"CLIP embedding backend unavailable: {exc}") from exc
    try:
        model = CLIPModel.from_pretrained(source, local_files_only=True)
        processor = CLIPProcessor.from_pretrained(source, local_files_only=True)
    except Exception as exc:
        raise BackendError(f"could not load CLIP weights from {source!r}: {exc}") from exc
    model.eval()

    class _ClipEmbedder:
        name = f"clip:{os.path.basename(str(source)) or source}"

        @torch.no_grad()
        def embed_text(self, text: str) -> torch.Tensor:
            if not text or not text.strip():
                raise EvalError("empty prompt cannot be embedded")
            inputs = processor(text=[text], return_tensors="pt", padding=True)
            return model.get_text_features(**inputs)[0]

        @torch.no_grad()
        def embed_image(self, image) -> torch.Tensor:
            img = (_as_float_image(image) * 255.0).to(torch.uint8).numpy()
            inputs = processor(images=[img], return_tensors="pt")
            return model.get_image_features(**inputs)[0]

    return _ClipEmbedder()


def _cosine(a: torch.Tensor, b: torch.Tensor) -> float:
    num = torch.dot(a.flatten(), b.flatten())
    den = (a.norm() * b.norm()).clamp_min(1e-12)
    return float(num / den)


def clip_text_image(views: Sequence, prompt: str, embedder: Optional[Embedder] = None) -> float:
    """Mean cosine between the embedded prompt and each embedded view."""
    scores = text_image_scores(views, prompt, embedder)
    return sum(scores) / len(scores)


def text_image_scores(
    views: Sequence, prompt: str, embedder: Optional[Embedder] = None
) -> list[float]:
    if len(views) == 0:
        raise EvalError("no views to score")
    if not prompt or not prompt.strip():
        raise EvalError("empty prompt")
    emb = embedder or StubEmbedder()
    t = emb.embed_text(prompt)
    return [_cosine(t, emb.embed_image(v)) for v in views]


def clip_image_image(views: Sequence, content_image, embedder: Optional[Embedder] = None) -> float:
    """Mean cosine between the content reference and each view."""
    scores = image_image_scores(views, content_image, embedder)
    return sum(scores) / len(scores)


def image_image_scores(
    views: Sequence, content_image, embedder: Optional[Embedder] = None
) -> list[float]:
    if len(views) == 0:
        raise EvalError("no views to score")
    emb = embedder or StubEmbedder()
    c = emb.embed_image(content_image)
    return [_cosine(c, emb.embed_image(v)) for v in views]


@dataclass(frozen=True)
class EvalCase:
    """One scored unit: a content reference, a style tag or prompt, and
    exactly six rendered views."""

    case_id: str
    prompt: str
    content_image: torch.Tensor
    views: tuple
    style: str = ""

    def __post_init__(self) -> None:
        if len(self.views) != 6:
            raise EvalError(
                f"case {self.case_id!r} must have exactly six views, got {len(self.views)}"
            )
        if not self.prompt or not self.prompt.strip():
            raise EvalError(f"case {self.case_id!r} has an empty prompt")


@dataclass(frozen=True)
class CaseScore:
    case_id: str
    style: str
    text_image: float
    image_image: float
    view_text_image: tuple
    view_image_image: tuple


@dataclass(frozen=True)
class ScoreReport:
    cases: tuple
    mean_text_image: float
    mean_image_image: float
    aggregate: str
    config_hash: str
    embedder: str

    def to_dict(self) -> dict:
        return {
            "aggregate": self.aggregate,
            "cases": [
                {
                    "case_id": c.case_id,
                    "image_image": _fixed6(c.image_image),
                    "style": c.style,
                    "text_image": _fixed6(c.text_image),
                }
                for c in self.cases
            ],
            "config_hash": self.config_hash,
            "embedder": self.embedder,
            "mean": {
                "image_image": _fixed6(self.mean_image_image),
                "text_image": _fixed6(self.mean_text_image),
            },
        }

    def write(self, out_dir: str) -> tuple[str, str]:
        """Persist report.json and report.csv; returns their paths."""
        os.makedirs(out_dir, exist_ok=True)
        json_path = os.path.join(out_dir, "report.json")
        csv_path = os.path.join(out_dir, "report.csv")
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")
        lines = ["case_id,text_image,image_image"]
        for c in self.cases:
            lines.append(f"{c.case_id},{c.text_image:.6f},{c.image_image:.6f}")
        lines.append(f"MEAN,{self.mean_text_image:.6f},{self.mean_image_image:.6f}")
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            fh.write("\n".join(lines) + "\n")
        return json_path, csv_path


def _fixed6(x: float) -> float:
    """Fix a float at six decimals; parsing the formatted text back keeps
    the JSON value identical to the CSV value."""
    return float(f"{x:.6f}")


def _mean(xs: Iterable[float]) -> float:
    xs = list(xs)
    return sum(xs) / len(xs) if xs else 0.0


def score_cases(
    cases: Sequence[EvalCase],
    embedder: Optional[Embedder] = None,
    aggregate: str = "flat",
) -> ScoreReport:
    """Score every case and aggregate.

    aggregate="flat" averages over all (case, view) pairs; "per_case"
    averages the per-case means. With the fixed six views per case the two
    coincide up to rounding, both stay available for protocol comparison.
    """
    if aggregate not in ("flat", "per_case"):
        raise EvalError(f"unknown aggregate mode {aggregate!r}")
    if len(cases) == 0:
        raise EvalError("manifest lists no cases, refusing to write an empty report")
    emb = embedder or StubEmbedder()
    rows = []
    for case in cases:
        ti = text_image_scores(case.views, case.prompt, emb)
        ii = image_image_scores(case.views, case.content_image, emb)
        rows.append(
            CaseScore(
                case_id=case.case_id,
                style=case.style,
                text_image=_mean(ti),
                image_image=_mean(ii),
                view_text_image=tuple(ti),
                view_image_image=tuple(ii),
            )
        )
    if aggregate == "flat":
        mean_ti = _mean(s for r in rows for s in r.view_text_image)
        mean_ii = _mean(s for r in rows for s in r.view_image_image)
    else:
        mean_ti = _mean(r.text_image for r in rows)
        mean_ii = _mean(r.image_image for r in rows)
    cfg = {
        "aggregate": aggregate,
        "cases": [{"case_id": c.case_id, "prompt": c.prompt, "style": c.style} for c in cases],
        "embedder": emb.name,
    }
    digest = hashlib.sha256(
        json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    ).hexdigest()[:12]
    return ScoreReport(
        cases=tuple(rows),
        mean_text_image=mean_ti,
        mean_image_image=mean_ii,
        aggregate=aggregate,
        config_hash=digest,
        embedder=emb.name,
    )


def load_manifest(path: str) -> list[EvalCase]:
    """Read a JSON manifest of cases and their assets from disk.

    The manifest is a list (or {"cases": [...]}) of objects with keys
    content (reference image path), views_dir (directory holding
    view_0.png .. view_5.png), prompt, and optional style / case_id.
    Relative paths resolve against the manifest's directory. Every
    missing asset across all cases is collected into one error.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise EvalError(f"manifest not found: {path}")
    except json.JSONDecodeError as exc:
        raise EvalError(f"manifest is not valid JSON: {exc}")
    if isinstance(raw, dict):
        raw = raw.get("cases", None)
    if not isinstance(raw, list):
        raise EvalError("manifest must be a list of cases or {'cases': [...]}")
    if len(raw) == 0:
        raise EvalError("manifest lists no cases, refusing to write an empty report")

    base = os.path.dirname(os.path.abspath(path))

    def resolve(p: str) -> str:
        return p if os.path.isabs(p) else os.path.join(base, p)

    missing: list[str] = []
    plans = []
    for i, entry in enumerate(raw):
        if not isinstance(entry, dict):
            raise EvalError(f"case {i} is not an object")
        for key in ("content", "views_dir", "prompt"):
            if key not in entry:
                raise EvalError(f"case {i} is missing required key {key!r}")
        content = resolve(entry["content"])
        views_dir = resolve(entry["views_dir"])
        if not os.path.isfile(content):
            missing.append(content)
        view_paths = [os.path.join(views_dir, f"view_{k}.png") for k in range(6)]
        if not os.path.isdir(views_dir):
            missing.append(views_dir)
        else:
            missing.extend(p for p in view_paths if not os.path.isfile(p))
        plans.append(
            (
                str(entry.get("case_id", f"case_{i}")),
                str(entry["prompt"]),
                str(entry.get("style", "")),
                content,
                view_paths,
            )
        )
    if missing:
        listing = "\n  ".join(missing)
        raise EvalError(f"{len(missing)} missing assets:\n  {listing}")

    cases = []
    for case_id, prompt, style, content, view_paths in plans:
        cases.append(
            EvalCase(
                case_id=case_id,
                prompt=prompt,
                style=style,
                content_image=torch.from_numpy(load_image(content)),
                views=tuple(torch.from_numpy(load_image(p)) for p in view_paths),
            )
        )
    return cases


def eval_run(
    manifest: Union[str, Sequence[EvalCase]],
    out_dir: Optional[str] = None,
    embedder: Optional[Embedder] = None,
    aggregate: str = "flat",
) -> ScoreReport:
    """Score a manifest of cases and optionally persist report.json/.csv."""
    cases = load_manifest(manifest) if isinstance(manifest, (str, os.PathLike)) else list(manifest)
    report = score_cases(cases, embedder=embedder, aggregate=aggregate)
    if out_dir is not None:
        report.write(out_dir)
    return report
