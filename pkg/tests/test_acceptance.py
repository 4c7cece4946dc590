"""Exit criteria for the build, each at its stated tolerance and time budget.

Run ``pytest tests/test_acceptance.py`` (or this file directly); the terminal
summary prints one PASS/FAIL line per criterion.
"""

import math
import threading
import time
import warnings
from concurrent.futures import ThreadPoolExecutor

import httpx
import numpy as np
import pytest

from histoatlas.analytics import (
    calinski_harabasz,
    davies_bouldin,
    pca_fit,
    silhouette,
    single_linkage,
    validity_indices,
)
from histoatlas.annotation import AnnotatedRegion
from histoatlas.atlas_index import build_atlas, knn, load_atlas, save_atlas
from histoatlas.embedding_io import decode_emb1, encode_emb1, read_embeddings, write_embeddings
from histoatlas.evaluation import classification_metrics, evaluate, top3_from_predictions
from histoatlas.patching import ArrayRaster, PatchSpec, deconvolve, extract_patches, plan_grid, synthesize
from histoatlas.projection import TsneConfig, conditional_probabilities, tsne
from histoatlas.service import make_server
from histoatlas.synthetic import gaussian_classes, simplex_centers
from conftest import make_set, small_labels
from oracles import (
    brute_knn,
    naive_calinski_harabasz,
    naive_davies_bouldin,
    naive_silhouette,
    naive_single_linkage,
)
from published_counts import replay_predictions


class Criterion:
    """Times a criterion and attaches a one-line detail to its report."""

    def __init__(self, node, budget: float | None):
        self.node, self.budget = node, budget
        self.start = time.perf_counter()

    def elapsed(self) -> float:
        return time.perf_counter() - self.start

    def done(self, detail: str) -> None:
        took = self.elapsed()
        self.node.acceptance_detail = f"{detail}; {took:.2f}s" + (f" / {self.budget:g}s" if self.budget else "")
        if self.budget is not None:
            assert took < self.budget, f"took {took:.2f}s, budget {self.budget}s"


@pytest.fixture
def criterion(request):
    budget = request.node.get_closest_marker("acceptance").kwargs.get("budget")
    return Criterion(request.node, budget)


# ---------------------------------------------------------------------------


@pytest.mark.acceptance(1, "published-count replay", budget=1.0)
def test_c1_published_count_replay(criterion):
    truth, pred, slides = replay_predictions()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        per, acc = classification_metrics(truth, pred)
    assert round(acc, 4) == 0.8774 and f"{acc:.2f}" == "0.88"
    assert [f"{per[c].recall:.2f}" for c in (11, 12, 32)] == ["0.95", "1.00", "0.47"]
    assert round(per[11].precision, 4) == 0.9557 and f"{per[11].precision:.2f}" == "0.96"
    tops = {}
    for cls in (11, 12, 32):
        preds = [p for p, s in zip(pred, slides) if s == f"test-{cls}"]
        tops[cls] = top3_from_predictions(preds)[0].percent
    assert (f"{tops[11]:.2f}", f"{tops[12]:.1f}", f"{tops[32]:.2f}") == ("95.27", "100.0", "47.26")
    criterion.done(f"accuracy {acc:.4f}, top-3 {tops[11]} / {tops[12]} / {tops[32]}")


@pytest.mark.acceptance(2, "k-NN exactness against brute force", budget=10.0)
def test_c2_knn_exactness(criterion):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for trial in range(200):
        n, d = int(rng.integers(1, 501)), int(rng.integers(1, 65))
        k = int(rng.integers(1, min(10, n) + 1))
        if trial % 3 == 0:
            # coarse integer grid: many exact distance ties, so tie order is exercised
            x = rng.integers(-1, 2, size=(n, d)).astype(float)
            q = rng.integers(-1, 2, size=d).astype(float)
        else:
            x, q = rng.normal(size=(n, d)), rng.normal(size=d)
        ids = [f"id{i:04d}" for i in rng.permutation(n)]
        emb = make_set(x, rng.integers(0, 4, n))
        emb = type(emb)(emb.vectors, [r.__class__(pid, r.slide_id, r.label_id) for pid, r in zip(ids, emb.records)])
        atlas = build_atlas(emb, small_labels(4))
        got = [(h.rank, h.patch_id, h.label_id, h.distance) for h in knn(atlas, q, k)]
        want = brute_knn(atlas.vectors, emb.patch_ids, emb.labels.tolist(), q, k)
        assert [g[:3] for g in got] == [w[:3] for w in want]
        for g, w in zip(got, want):
            worst = max(worst, abs(g[3] - w[3]) / max(w[3], 1e-300))
        assert worst <= 1e-12
    criterion.done(f"200 instances identical, max distance rel. diff {worst:.1e}")


@pytest.mark.acceptance(3, "synthetic end-to-end retrieval", budget=30.0)
def test_c3_synthetic_retrieval(criterion):
    rng = np.random.default_rng(3)
    centers = simplex_centers(5, 64, 10.0)
    atlas = build_atlas(gaussian_classes(centers, 2000, 1.0, rng, prefix="atlas"), small_labels(5))
    test = gaussian_classes(centers, 500, 1.0, rng, prefix="test")
    report = evaluate(atlas, test, [1, 3, 5, 7])
    majority = [report.accuracy_majority[n] for n in (1, 3, 5, 7)]
    topn = [report.accuracy_topn[n] for n in (1, 3, 5, 7)]
    assert min(majority) >= 0.99
    assert topn == sorted(topn)
    criterion.done(f"majority-n accuracy min {min(majority):.4f}")


@pytest.mark.acceptance(4, "validity-index oracles and fixtures", budget=5.0)
def test_c4_validity_indices(criterion):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        k = int(rng.integers(2, 5))
        n = int(rng.integers(k + 1, 30))
        d = int(rng.integers(1, 6))
        y = np.concatenate([np.arange(k), rng.integers(0, k, n - k)])
        x = rng.normal(size=(k, d))[y] * 2 + rng.normal(size=(n, d))
        pairs = [
            (silhouette(x, y), naive_silhouette(x, y)),
            (davies_bouldin(x, y), naive_davies_bouldin(x, y)),
            (calinski_harabasz(x, y), naive_calinski_harabasz(x, y)),
        ]
        for got, want in pairs[:2]:
            worst = max(worst, abs(got - want))
            assert abs(got - want) <= 1e-9
        got, want = pairs[2]
        assert abs(got - want) <= 1e-9 * max(1.0, abs(want))
    two = np.array([[0, 0], [0, 1], [10, 0], [10, 1]], float)
    ty = [0, 0, 1, 1]
    s, db, ch = silhouette(two, ty), davies_bouldin(two, ty), calinski_harabasz(two, ty)
    assert abs(s - 0.9002) <= 1e-4 and abs(db - 0.1) <= 1e-9 and abs(ch - 200.0) <= 1e-6
    criterion.done(f"fixture {s:.4f} / {db:.4f} / {ch:.1f}, max oracle diff {worst:.1e}")


def signal_plus_noise(rng, n_classes=10, per=40, signal=8, noise=120, spread=3.0):
    # class means live in the signal block only; every dimension carries unit noise
    means = np.zeros((n_classes, signal + noise))
    means[:, :signal] = rng.normal(scale=spread, size=(n_classes, signal))
    y = np.repeat(np.arange(n_classes), per)
    return means[y] + rng.normal(size=(len(y), signal + noise)), y


@pytest.mark.acceptance(5, "top-8 PCA improves all three indices", budget=60.0)
def test_c5_pca_improves_indices(criterion):
    wins = 0
    for seed in range(100):
        x, y = signal_plus_noise(np.random.default_rng(seed))
        full = validity_indices(x, y)
        reduced = validity_indices(pca_fit(x, 8).transform(x), y)
        wins += (
            reduced["silhouette"] > full["silhouette"]
            and reduced["davies_bouldin"] < full["davies_bouldin"]
            and reduced["calinski_harabasz"] > full["calinski_harabasz"]
        )
    assert wins >= 95
    criterion.done(f"{wins}/100 trials improved on all three")


@pytest.mark.acceptance(6, "single-linkage correctness")
def test_c6_single_linkage(criterion):
    rng = np.random.default_rng(6)
    for trial in range(100):
        n = int(rng.integers(2, 13))
        if trial % 2:
            pts = {i: rng.integers(0, 3, size=2).astype(float) for i in range(n)}
        else:
            d = int(rng.integers(1, 6))
            pts = {i: rng.normal(size=d) for i in range(n)}
        got = [(m.left, m.right, m.height, m.size) for m in single_linkage(pts).merges]
        assert got == naive_single_linkage(pts)
    heights = [m.height for m in single_linkage({0: [0.0], 1: [1.0], 2: [10.0]}).merges]
    assert heights == [1.0, 9.0]
    criterion.done("100 trials identical to the naive oracle, heights (1, 9)")


def stain_pixel(conc) -> np.ndarray:
    rows = np.array([(0.650, 0.704, 0.286), (0.072, 0.990, 0.105), (0.268, 0.570, 0.776)])
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    return np.clip(np.round(255 * 10 ** (-(np.asarray(conc, float) @ rows))), 0, 255).astype(np.uint8)


@pytest.mark.acceptance(7, "stain deconvolution round-trip", budget=5.0)
def test_c7_stain_round_trip(criterion):
    worst_conc = 0.0
    for channel in range(3):
        conc = np.zeros(3)
        conc[channel] = 1.0
        got = deconvolve(stain_pixel(conc)[None, None, :])[0, 0]
        worst_conc = max(worst_conc, float(np.max(np.abs(got - conc))))
    assert worst_conc <= 0.02
    img = np.random.default_rng(7).integers(0, 256, size=(256, 256, 3), dtype=np.uint8)
    # zero intensity has no optical density; it is clamped to 1 before the log
    back = np.clip(np.rint(synthesize(deconvolve(img))), 0, 255)
    worst_level = float(np.max(np.abs(back - np.maximum(img, 1))))
    assert worst_level <= 2.0
    criterion.done(f"concentration error {worst_conc:.4f}, intensity error {worst_level:.2f}")


def box(x0, y0, x1, y1):
    return AnnotatedRegion("r", 0, ((x0, y0), (x1, y0), (x1, y1), (x0, y1)), "s")


@pytest.mark.acceptance(8, "patching arithmetic")
def test_c8_patching_arithmetic(criterion):
    spec = PatchSpec()
    region = box(0, 0, 5120, 5120)
    at_020 = len(plan_grid(region, spec, overlap=0.20).origins)
    assert at_020 == 144
    counts = [len(plan_grid(region, spec, overlap=o).origins) for o in spec.overlap_grid()]
    assert counts == sorted(counts)

    # 50x50 patches whose nucleus pixels sit on a checkerboard, filled to a chosen count
    size, counts_wanted = 50, [0, 150, 199, 200, 201, 260, 1250]
    img = np.full((size, size * len(counts_wanted), 3), 255, np.uint8)
    yy, xx = np.mgrid[0:size, 0:size]
    cells = np.flatnonzero(((yy + xx) % 2 == 0).ravel())
    for j, c in enumerate(counts_wanted):
        mask = np.zeros(size * size, bool)
        mask[cells[:c]] = True
        img[:, j * size:(j + 1) * size][mask.reshape(size, size)] = stain_pixel([1.0, 0, 0])
    pspec = PatchSpec(patch_size=size, min_patches_target=1)
    res = extract_patches(ArrayRaster(img), [box(j * size, 0, (j + 1) * size, size) for j in range(len(counts_wanted))],
                          pspec)
    by_x = {r.origin[0] // size: r for r in res.records}
    assert len(by_x) == len(counts_wanted)
    for j, c in enumerate(counts_wanted):
        r = by_x[j]
        assert r.cellularity == c / size**2
        assert r.retained == (r.cellularity > 0.08)
    assert [by_x[j].retained for j in range(len(counts_wanted))] == [False, False, False, False, True, True, True]
    criterion.done(f"144 candidates at 0.20, counts {counts[0]}..{counts[-1]} monotone, 0.08 boundary exact")


@pytest.mark.acceptance(9, "t-SNE properties at n=300", budget=120.0)
def test_c9_tsne(criterion):
    rng = np.random.default_rng(9)
    centres = np.eye(3, 16) * 10.0 / math.sqrt(2)
    y = np.repeat(np.arange(3), 100)
    x = centres[y] + rng.normal(scale=0.3, size=(300, 16))
    cfg = TsneConfig(seed=7)
    _, H = conditional_probabilities(x, cfg.perplexity)
    entropy_err = float(np.max(np.abs(H - math.log2(cfg.perplexity))))
    assert entropy_err <= 1e-5
    a, b = tsne(x, cfg), tsne(x, cfg)
    assert a.coords.tobytes() == b.coords.tobytes()
    assert a.kl_trace[-1] <= a.kl_trace[250]
    medoids = []
    for c in range(3):
        pts = a.coords[y == c]
        medoids.append(pts[np.argmin(np.linalg.norm(pts[:, None] - pts[None], axis=2).sum(axis=1))])
    assigned = np.argmin(np.linalg.norm(a.coords[:, None] - np.array(medoids)[None], axis=2), axis=1)
    agreement = float(np.mean(assigned == y))
    assert agreement >= 0.95
    criterion.done(f"entropy error {entropy_err:.1e}, KL {a.kl_trace[250]:.3f} -> {a.kl_trace[-1]:.3f}, "
                   f"agreement {agreement:.3f}")


@pytest.mark.acceptance(10, "format and service contracts")
def test_c10_format_and_service(criterion, tmp_path):
    rng = np.random.default_rng(10)
    emb = make_set(rng.normal(size=(200, 32)).astype(np.float32), rng.integers(0, 4, 200))
    write_embeddings(emb, tmp_path / "e.emb")
    raw = (tmp_path / "e.emb").read_bytes()
    again = read_embeddings(tmp_path / "e.emb")
    assert again.vectors.tobytes() == emb.vectors.tobytes() and encode_emb1(decode_emb1(raw)) == raw
    atlas_path = tmp_path / "a.atl"
    save_atlas(build_atlas(again, small_labels(4)), atlas_path)
    atlas_bytes = atlas_path.read_bytes()
    assert load_atlas(atlas_path).to_bytes() == atlas_bytes

    server = make_server(atlas_path, port=0, load_in_background=False)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    url = f"http://127.0.0.1:{server.server_address[1]}"
    try:
        before = httpx.get(f"{url}/healthz").json()["atlas_checksum"]
        row = server.atlas.vectors[11].astype(float).tolist()
        hit = httpx.post(f"{url}/search", json={"vector": row, "k": 1}).json()["hits"][0]
        assert hit["distance"] == 0.0 and hit["patch_id"] == emb.patch_ids[11]
        body = {"vector": rng.normal(size=32).tolist(), "k": 7}
        with httpx.Client() as client, ThreadPoolExecutor(32) as pool:
            bodies = list(pool.map(lambda _: client.post(f"{url}/search", json=body).content, range(32)))
        assert len(set(bodies)) == 1
        with httpx.Client() as client:
            for _ in range(1000):
                q = {"vector": rng.normal(size=32).tolist(), "k": 5}
                assert client.post(f"{url}/search", json=q).status_code == 200
        after = httpx.get(f"{url}/healthz").json()["atlas_checksum"]
    finally:
        server.shutdown()
        server.server_close()
    assert before == after == load_atlas(atlas_path).checksum
    assert atlas_path.read_bytes() == atlas_bytes
    criterion.done("EMB1/ATL1 bit-exact, self-hit 0, 32 identical bodies, checksum stable over 1000 requests")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
