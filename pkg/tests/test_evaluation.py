import json

import numpy as np
import pytest
import torch

from style3d.errors import BackendError, EvalError
from style3d.evaluation import (
    EvalCase,
    StubEmbedder,
    clip_image_image,
    clip_text_image,
    eval_run,
    image_image_scores,
    load_clip_embedder,
    load_manifest,
    score_cases,
    text_image_scores,
)
from style3d.imgio import save_png


def _solid(color, size=16):
    return np.tile(np.asarray(color, dtype=np.float32), (size, size, 1))


def _case(case_id, color, prompt, style="s", gen=None):
    gen = gen or torch.Generator().manual_seed(0)
    views = tuple(
        torch.from_numpy(_solid(color)) + 0.01 * torch.rand(16, 16, 3, generator=gen)
        for _ in range(6)
    )
    return EvalCase(
        case_id=case_id,
        prompt=prompt,
        content_image=torch.from_numpy(_solid(color)),
        views=views,
        style=style,
    )


def test_stub_embeddings_are_unit_and_deterministic():
    e1, e2 = StubEmbedder(), StubEmbedder()
    t = e1.embed_text("a golden detailed statue")
    assert float(t.norm()) == pytest.approx(1.0, abs=1e-6)
    assert torch.equal(t, e2.embed_text("a golden detailed statue"))
    img = _solid((0.3, 0.6, 0.9))
    v = e1.embed_image(img)
    assert float(v.norm()) == pytest.approx(1.0, abs=1e-6)
    assert torch.equal(v, e2.embed_image(img))


def test_stub_accepts_uint8_and_float_equally():
    e = StubEmbedder()
    f = _solid((0.2, 0.4, 0.8))
    u = (f * 255.0).round().astype(np.uint8)
    assert torch.allclose(e.embed_image(f), e.embed_image(u), atol=1e-2)


def test_color_captions_rank_matching_renders_first():
    e = StubEmbedder()
    colors = {
        "red": (1.0, 0.1, 0.1),
        "green": (0.1, 0.8, 0.1),
        "blue": (0.1, 0.2, 1.0),
        "yellow": (1.0, 0.9, 0.1),
        "magenta": (0.9, 0.1, 0.9),
    }
    names = list(colors)
    prompts = {n: f"a {n} sculpture" for n in names}
    hits = 0
    for name in names:
        img = _solid(colors[name])
        scores = {n: clip_text_image([img], prompts[n], e) for n in names}
        if max(scores, key=scores.get) == name:
            hits += 1
    assert hits >= 4, hits


def test_identical_images_score_one():
    img = torch.rand(16, 16, 3, generator=torch.Generator().manual_seed(5))
    assert clip_image_image([img.clone()], img) == pytest.approx(1.0, abs=1e-6)


def test_scores_are_bounded_cosines():
    gen = torch.Generator().manual_seed(6)
    e = StubEmbedder()
    for _ in range(100):
        a = torch.rand(8, 8, 3, generator=gen)
        b = torch.rand(8, 8, 3, generator=gen)
        s = image_image_scores([a], b, e)[0]
        assert -1.0 - 1e-6 <= s <= 1.0 + 1e-6
    t = text_image_scores([a], "weathered bronze with detailed engraving", e)[0]
    assert -1.0 - 1e-6 <= t <= 1.0 + 1e-6


def test_detail_words_track_edge_density():
    e = StubEmbedder()
    gen = torch.Generator().manual_seed(7)
    noisy = torch.rand(32, 32, 3, generator=gen)
    flat = torch.full((32, 32, 3), 0.5)
    busy_prompt = "a gray intricate surface"
    plain_prompt = "a gray smooth surface"
    assert clip_text_image([noisy], busy_prompt, e) > clip_text_image([flat], busy_prompt, e)
    assert clip_text_image([flat], plain_prompt, e) > clip_text_image([noisy], plain_prompt, e)


def test_eval_case_validation():
    with pytest.raises(EvalError, match="six views"):
        EvalCase(case_id="x", prompt="p", content_image=torch.zeros(4, 4, 3),
                 views=tuple(torch.zeros(4, 4, 3) for _ in range(5)))
    with pytest.raises(EvalError, match="empty prompt"):
        _case("x", (1, 0, 0), "   ")
    with pytest.raises(EvalError):
        text_image_scores([], "p")
    with pytest.raises(EvalError, match="empty"):
        StubEmbedder().embed_text("  ")


def test_score_report_structure_and_aggregates():
    cases = [
        _case("a", (1.0, 0.1, 0.1), "a red sculpture"),
        _case("b", (0.1, 0.2, 1.0), "a blue sculpture"),
    ]
    rep = score_cases(cases)
    assert rep.embedder == "stub-v1"
    assert rep.aggregate == "flat"
    assert len(rep.cases) == 2
    for row in rep.cases:
        assert len(row.view_text_image) == 6
        assert row.text_image == pytest.approx(sum(row.view_text_image) / 6.0)

    flat = score_cases(cases, aggregate="flat")
    per = score_cases(cases, aggregate="per_case")
    # six views in every case, so the two protocols coincide
    assert flat.mean_text_image == pytest.approx(per.mean_text_image, abs=1e-12)
    assert flat.mean_image_image == pytest.approx(per.mean_image_image, abs=1e-12)
    assert flat.config_hash != per.config_hash

    with pytest.raises(EvalError, match="aggregate"):
        score_cases(cases, aggregate="median")
    with pytest.raises(EvalError, match="no cases"):
        score_cases([])


def test_report_files_are_byte_reproducible(tmp_path):
    cases = [_case("only", (0.9, 0.5, 0.1), "an orange figurine")]
    j1, c1 = eval_run(cases, out_dir=str(tmp_path / "r1")).write(str(tmp_path / "r1"))
    j2, c2 = eval_run(cases, out_dir=str(tmp_path / "r2")).write(str(tmp_path / "r2"))
    assert open(j1, "rb").read() == open(j2, "rb").read()
    assert open(c1, "rb").read() == open(c2, "rb").read()


def test_csv_and_json_agree_to_six_decimals(tmp_path):
    cases = [
        _case("a", (1.0, 0.1, 0.1), "a red sculpture"),
        _case("b", (0.1, 0.8, 0.1), "a green sculpture"),
    ]
    rep = eval_run(cases, out_dir=str(tmp_path))
    doc = json.loads((tmp_path / "report.json").read_text())
    lines = (tmp_path / "report.csv").read_text().strip().splitlines()
    assert lines[0] == "case_id,text_image,image_image"
    assert lines[-1].startswith("MEAN,")
    assert len(lines) == 2 + len(cases)
    for row, entry in zip(lines[1:-1], doc["cases"]):
        cid, ti, ii = row.split(",")
        assert cid == entry["case_id"]
        assert float(ti) == entry["text_image"]
        assert float(ii) == entry["image_image"]
    mean = lines[-1].split(",")
    assert float(mean[1]) == doc["mean"]["text_image"]
    assert float(mean[2]) == doc["mean"]["image_image"]
    assert doc["embedder"] == "stub-v1"
    assert doc["config_hash"] == rep.config_hash


def _write_views(directory, color, n=6):
    directory.mkdir(parents=True, exist_ok=True)
    for k in range(n):
        save_png(str(directory / f"view_{k}.png"), _solid(color))


def test_manifest_loading_and_relative_resolution(tmp_path):
    _write_views(tmp_path / "views_a", (0.9, 0.2, 0.2))
    save_png(str(tmp_path / "content_a.png"), _solid((0.8, 0.2, 0.2)))
    manifest = [{
        "case_id": "a",
        "content": "content_a.png",
        "views_dir": "views_a",
        "prompt": "a red sculpture",
        "style": "oil",
    }]
    mpath = tmp_path / "manifest.json"
    mpath.write_text(json.dumps(manifest))
    cases = load_manifest(str(mpath))
    assert len(cases) == 1
    assert cases[0].case_id == "a" and cases[0].style == "oil"
    assert cases[0].content_image.shape == (16, 16, 3)
    assert len(cases[0].views) == 6

    wrapped = tmp_path / "wrapped.json"
    wrapped.write_text(json.dumps({"cases": manifest}))
    assert len(load_manifest(str(wrapped))) == 1


def test_manifest_collects_every_missing_asset(tmp_path):
    _write_views(tmp_path / "views_ok", (0.5, 0.5, 0.5))
    (tmp_path / "views_ok" / "view_3.png").unlink()
    save_png(str(tmp_path / "content_ok.png"), _solid((0.5, 0.5, 0.5)))
    manifest = [
        {"content": "missing.png", "views_dir": "views_ok", "prompt": "p"},
        {"content": "content_ok.png", "views_dir": "absent_dir", "prompt": "p"},
    ]
    mpath = tmp_path / "manifest.json"
    mpath.write_text(json.dumps(manifest))
    with pytest.raises(EvalError, match="3 missing assets") as err:
        load_manifest(str(mpath))
    msg = str(err.value)
    assert "missing.png" in msg and "absent_dir" in msg and "view_3.png" in msg


def test_manifest_error_cases(tmp_path):
    with pytest.raises(EvalError, match="not found"):
        load_manifest(str(tmp_path / "nope.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(EvalError, match="not valid JSON"):
        load_manifest(str(bad))
    scalar = tmp_path / "scalar.json"
    scalar.write_text("42")
    with pytest.raises(EvalError, match="list of cases"):
        load_manifest(str(scalar))
    empty = tmp_path / "empty.json"
    empty.write_text("[]")
    with pytest.raises(EvalError, match="no cases"):
        load_manifest(str(empty))
    nokey = tmp_path / "nokey.json"
    nokey.write_text(json.dumps([{"content": "x.png", "prompt": "p"}]))
    with pytest.raises(EvalError, match="views_dir"):
        load_manifest(str(nokey))
    notobj = tmp_path / "notobj.json"
    notobj.write_text(json.dumps(["x"]))
    with pytest.raises(EvalError, match="not an object"):
        load_manifest(str(notobj))


@pytest.mark.filterwarnings("ignore::DeprecationWarning")
def test_clip_loader_fails_loudly_without_weights(monkeypatch):
    monkeypatch.delenv("STYLE3D_CACHE", raising=False)
    with pytest.raises(BackendError, match="no CLIP weights configured"):
        load_clip_embedder()
    with pytest.raises(BackendError):
        load_clip_embedder(weights_path="/definitely/not/here")
