import math
import struct

import numpy as np
import pytest
import torch

from helpers import fd_gradient, hdist_np, max_rel_error

from hyperproto.embed import (
    child_parent_win_fraction,
    median_child_margin,
    EmbedConfig,
    TemplateFormatError,
    TemplateMatrix,
    hierarchy_loss,
    read_templates,
    separation_loss,
    train_embeddings,
    write_templates,
)
from hyperproto.hierarchy import balanced_hierarchy, sample_pairs


def random_templates(tree, dim, seed, radius=0.5):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(tree.node_count, dim))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    pts *= rng.uniform(0.05, radius, size=(tree.node_count, 1))
    ids = [n.id for n in tree.nodes]
    return TemplateMatrix(ids, torch.tensor(pts, dtype=torch.float64))


def test_template_matrix_validation():
    with pytest.raises(ValueError, match="2-D"):
        TemplateMatrix([1], torch.zeros(3, dtype=torch.float64))
    with pytest.raises(ValueError, match="unique"):
        TemplateMatrix([1, 1], torch.zeros(2, 3, dtype=torch.float64))
    with pytest.raises(ValueError, match="node ids for"):
        TemplateMatrix([1, 2, 3], torch.zeros(2, 3, dtype=torch.float64))
    with pytest.raises(ValueError, match="unit ball"):
        TemplateMatrix([1], torch.tensor([[0.8, 0.8]], dtype=torch.float64))
    with pytest.raises(ValueError, match="float64"):
        TemplateMatrix([1], torch.zeros(1, 3, dtype=torch.float32))


def test_template_round_trip():
    tree = balanced_hierarchy(2, 2, 2)
    templates = random_templates(tree, 7, seed=0)
    again = read_templates(write_templates(templates))
    assert again.node_ids == templates.node_ids
    assert (again.points == templates.points).all()
    assert again.dim == 7


def test_template_read_rejections():
    tree = balanced_hierarchy(1, 2, 2)
    blob = write_templates(random_templates(tree, 3, seed=1))
    with pytest.raises(TemplateFormatError, match="bad magic"):
        read_templates(b"XXXX" + blob[4:])
    with pytest.raises(TemplateFormatError, match="version"):
        read_templates(blob[:4] + struct.pack("<I", 9) + blob[8:])
    with pytest.raises(TemplateFormatError, match="size mismatch"):
        read_templates(blob[:-4])
    with pytest.raises(TemplateFormatError, match="truncated"):
        read_templates(blob[:6])

    # a row pushed outside the unit ball must be rejected on load
    count, dim = 7, 3
    bad = np.full((count, dim), 1.2 / math.sqrt(dim))
    header = struct.pack("<4sIII", b"HPTM", 1, dim, count)
    ids = struct.pack(f"<{count}I", *range(1, count + 1))
    with pytest.raises(TemplateFormatError, match="unit ball"):
        read_templates(header + ids + bad.tobytes())


def test_hierarchy_loss_matches_oracle():
    tree = balanced_hierarchy(2, 2, 2)
    templates = random_templates(tree, 4, seed=3)
    batch = sample_pairs(tree, negatives_per_positive=3, seed=5)
    loss = hierarchy_loss(templates, batch).item()

    pts = {i: templates.point(i).numpy() for i in templates.node_ids}
    expected = 0.0
    for (v, u), negs in zip(batch.positives, batch.negatives):
        d_pos = hdist_np(pts[v], pts[u])
        denom = sum(math.exp(-hdist_np(pts[v], pts[upp])) for _, upp in negs)
        expected += -math.log(math.exp(-d_pos) / denom)
    assert math.isclose(loss, expected, rel_tol=1e-9)


def test_hierarchy_loss_positive_in_denominator():
    tree = balanced_hierarchy(1, 2, 2)
    templates = random_templates(tree, 4, seed=4)
    batch = sample_pairs(tree, negatives_per_positive=2, seed=6)
    base = hierarchy_loss(templates, batch, include_positive=False).item()
    widened = hierarchy_loss(templates, batch, include_positive=True).item()
    # the positive inflates each denominator, so the loss can only grow,
    # and every per-pair softmax drops below 1 making the sum positive
    assert widened > base
    assert widened > 0

    pts = {i: templates.point(i).numpy() for i in templates.node_ids}
    expected = 0.0
    for (v, u), negs in zip(batch.positives, batch.negatives):
        d_pos = hdist_np(pts[v], pts[u])
        denom = math.exp(-d_pos)
        denom += sum(math.exp(-hdist_np(pts[v], pts[upp])) for _, upp in negs)
        expected += -math.log(math.exp(-d_pos) / denom)
    assert math.isclose(widened, expected, rel_tol=1e-9)


def test_separation_loss_matches_oracle():
    tree = balanced_hierarchy(2, 2, 3)   # 12 children in families of 3
    templates = random_templates(tree, 5, seed=7)
    gamma = 0.37
    loss = separation_loss(templates, tree, orthogonality_weight=gamma).item()

    pts = templates.points.numpy()
    index = templates.index
    expected = 0.0
    for child in tree.child_ids:
        siblings = tree.siblings(child)
        sib = pts[[index[s] for s in siblings]]
        expected += -np.linalg.norm(sib @ sib.T)
        rest = [c for c in tree.child_ids if c != child and c not in siblings]
        other = pts[[index[c] for c in rest]]
        expected += gamma * np.linalg.norm(other.T @ other - np.eye(templates.dim))
    assert math.isclose(loss, expected, rel_tol=1e-9)


def test_separation_loss_only_child():
    # one family, one child: no siblings, no other children
    tree = balanced_hierarchy(1, 1, 1)
    templates = random_templates(tree, 6, seed=8)
    loss = separation_loss(templates, tree, orthogonality_weight=1.0).item()
    assert math.isclose(loss, math.sqrt(6.0), rel_tol=1e-12)


def test_separation_loss_sign_flip():
    tree = balanced_hierarchy(1, 2, 2)
    templates = random_templates(tree, 4, seed=9)
    down = separation_loss(templates, tree, 0.0, flip_sibling_sign=False).item()
    up = separation_loss(templates, tree, 0.0, flip_sibling_sign=True).item()
    assert math.isclose(down, -up, rel_tol=1e-12)


def test_loss_gradients_match_finite_differences():
    tree = balanced_hierarchy(1, 2, 2)
    batch = sample_pairs(tree, negatives_per_positive=2, seed=1)
    base = random_templates(tree, 3, seed=10)

    def pair_term(points):
        return hierarchy_loss(TemplateMatrix(base.node_ids, points), batch)

    def sep_term(points):
        return separation_loss(TemplateMatrix(base.node_ids, points), tree, 0.3)

    for func in (pair_term, sep_term):
        points = base.points.clone().requires_grad_(True)
        analytic = torch.autograd.grad(func(points), points)[0]
        numeric = fd_gradient(lambda p: func(p).item(), base.points.clone())
        assert max_rel_error(analytic, numeric) < 1e-4


def test_hierarchy_loss_rejects_bad_batches():
    tree = balanced_hierarchy(1, 2, 2)
    templates = random_templates(tree, 3, seed=11)
    from hyperproto.hierarchy import PairBatch
    with pytest.raises(ValueError, match="empty"):
        hierarchy_loss(templates, PairBatch(positives=(), negatives=()))
    ragged = PairBatch(
        positives=((1, 5), (2, 5)),
        negatives=(((1, 3),), ((2, 3), (2, 4))),
    )
    with pytest.raises(ValueError, match="same number"):
        hierarchy_loss(templates, ragged)


def test_train_embeddings_orders_parents_first():
    tree = balanced_hierarchy(2, 2, 2)
    cfg = EmbedConfig(dim=16, epochs=300, learning_rate=5e-3,
                      negatives_per_positive=5, separation_weight=0.0, seed=0)
    templates, trace = train_embeddings(tree, cfg)
    assert len(trace) == 300
    assert trace[-1]["total_loss"] < trace[0]["total_loss"]
    assert all(np.isfinite(entry["total_loss"]) for entry in trace)
    assert (templates.points.norm(dim=-1) < 1.0).all()
    assert child_parent_win_fraction(templates, tree, seed=1) >= 0.95
    assert median_child_margin(templates, tree) > 0


def test_train_embeddings_dim10_module_scale():
    # dim 10 needs a faster step to converge inside 500 epochs
    tree = balanced_hierarchy(3, 3, 3)
    cfg = EmbedConfig(dim=10, epochs=500, learning_rate=5e-3, seed=0)
    templates, _ = train_embeddings(tree, cfg)
    assert child_parent_win_fraction(templates, tree, seed=1) >= 0.95


def test_train_embeddings_lambda_zero_trace():
    tree = balanced_hierarchy(1, 2, 2)
    cfg = EmbedConfig(dim=8, epochs=40, separation_weight=0.0,
                      negatives_per_positive=3, seed=9)
    _, trace = train_embeddings(tree, cfg)
    for entry in trace:
        assert entry["separation_loss"] == 0.0
        assert entry["total_loss"] == entry["pair_loss"]


def test_train_embeddings_deterministic():
    tree = balanced_hierarchy(1, 2, 2)
    cfg = EmbedConfig(dim=8, epochs=50, negatives_per_positive=3, seed=4)
    first, trace_a = train_embeddings(tree, cfg)
    second, trace_b = train_embeddings(tree, cfg)
    assert (first.points == second.points).all()
    assert trace_a == trace_b
    assert write_templates(first) == write_templates(second)


def test_embed_config_validation():
    with pytest.raises(ValueError):
        EmbedConfig(dim=1).validate()
    with pytest.raises(ValueError):
        EmbedConfig(epochs=0).validate()
    with pytest.raises(ValueError):
        EmbedConfig(learning_rate=0.0).validate()
    with pytest.raises(ValueError):
        EmbedConfig(negatives_per_positive=0).validate()
    EmbedConfig().validate()
