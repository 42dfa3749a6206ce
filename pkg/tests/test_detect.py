import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lsda.boxes import Box, iou
from lsda.detect import (
    Detection,
    ProposalConfig,
    cross_category_nms,
    detect_image,
    grid_proposals,
    nms,
    propose_regions,
    read_detections,
    read_proposals,
    score_regions,
    write_detections,
    write_proposals,
)
from lsda.exceptions import ParseError, ValidationError
from lsda.model import CategoryPartition, NetworkParams, OutputHead, WeightMatrix, forward, init_network
from lsda.synth import warp_region


def d(score, box, cat=0, image="im"):
    return Detection(image, cat, score, Box(*box))


def test_grid_counts():
    assert grid_proposals((32, 32), ProposalConfig(scales=(32,), stride_fraction=1.0)) == [Box(0, 0, 32, 32)]
    boxes = grid_proposals((64, 64), ProposalConfig(scales=(32,), stride_fraction=0.5))
    assert len(boxes) == 9
    assert {b.x1 for b in boxes} == {0, 16, 32}


def test_grid_flush_to_edge_and_deduplicated():
    boxes = grid_proposals((50, 64), ProposalConfig(scales=(20, 20), stride_fraction=0.5))
    assert len(boxes) == len(set(boxes))
    assert max(b.x2 for b in boxes) == 64
    assert max(b.y2 for b in boxes) == 50
    with pytest.raises(ValidationError):
        grid_proposals((30, 30), ProposalConfig(scales=(32,)))
    with pytest.raises(ValidationError):
        ProposalConfig(stride_fraction=0.0)


def test_external_proposals(tmp_path):
    props = {"a": [Box(0, 0, 5, 5), Box(1, 1, 9, 9)], "b": [Box(2, 3, 4, 5)]}
    path = tmp_path / "props.tsv"
    write_proposals(props, path)
    assert read_proposals(path) == props
    cfg = ProposalConfig(external=str(path))
    assert propose_regions((10, 10), cfg, "a") == sorted(props["a"])
    assert propose_regions((10, 10), cfg, "zzz") == []
    with pytest.raises(ValidationError):
        propose_regions((4, 4), cfg, "a")
    path.write_text("a\t0,0,5,5\na\t5,5,3,9\n")
    with pytest.raises(ParseError, match=":2:"):
        read_proposals(path)


def test_nms_hand_cases():
    disjoint = [d(0.9, (0, 0, 5, 5)), d(0.8, (10, 10, 15, 15)), d(0.7, (20, 0, 25, 5))]
    assert nms(disjoint, 0.3) == disjoint
    same = [d(0.8, (0, 0, 10, 10)), d(0.9, (0, 0, 10, 10))]
    assert [x.score for x in nms(same, 0.3)] == [0.9]
    pair = [d(0.9, (0, 0, 10, 10)), d(0.8, (0, 3, 10, 13))]
    assert [x.score for x in nms(pair, 0.5)] == [0.9]
    assert [x.score for x in nms(pair, 0.6)] == [0.9, 0.8]
    assert nms([], 0.3) == []
    with pytest.raises(ValidationError):
        nms([d(0.9, (0, 0, 5, 5), cat=0), d(0.8, (0, 0, 5, 5), cat=1)])


def test_nms_exact_ties_by_position():
    tied = [d(0.5, (3, 0, 13, 10)), d(0.5, (0, 0, 10, 10))]
    assert nms(tied, 0.3)[0].box == Box(0, 0, 10, 10)


def test_cross_category_nms():
    assert cross_category_nms([d(0.1, (0, 0, 5, 5), 2)]) == [d(0.1, (0, 0, 5, 5), 2)]
    kept = cross_category_nms([d(0.4, (0, 0, 10, 10), 5), d(0.9, (0, 0, 10, 10), 3)])
    assert [(x.category, x.score) for x in kept] == [(3, 0.9)]


def greedy_reference(dets, thr):
    # exact ties fall back to x1, y1, then x2, y2
    order = sorted(dets, key=lambda x: (-x.score, x.box.x1, x.box.y1, x.box.x2, x.box.y2))
    kept = []
    for cand in order:
        if all(iou(cand.box, k.box) < thr for k in kept):
            kept.append(cand)
    return kept


def test_cross_category_three_overlapping():
    dets = [d(0.7, (0, 0, 10, 10), 0), d(0.8, (3, 0, 13, 10), 1), d(0.6, (6, 0, 16, 10), 2)]
    assert cross_category_nms(dets, 0.5) == greedy_reference(dets, 0.5)
    assert [x.category for x in cross_category_nms(dets, 0.5)] == [1]


det_st = st.tuples(st.integers(0, 100), st.integers(0, 20), st.integers(0, 20), st.integers(2, 12)).map(
    lambda t: d(t[0] / 100.0, (t[1], t[2], t[1] + t[3], t[2] + t[3])))


@settings(max_examples=150, deadline=None)
@given(st.lists(det_st, max_size=12), st.sampled_from([0.3, 0.5, 0.7]))
def test_nms_properties(dets, thr):
    kept = nms(dets, thr)
    assert kept == greedy_reference(dets, thr)
    for i, a in enumerate(kept):
        for b in kept[i + 1:]:
            assert iou(a.box, b.box) < thr
    assert nms(kept, thr) == kept


@pytest.fixture
def partition():
    return CategoryPartition.create(["a", "b", "c"], 1)


def detector(partition, seed=0, input_dim=16):
    net = init_network(partition, input_dim, (6, 5), seed=seed)
    rng = np.random.default_rng(seed)
    bg = WeightMatrix(rng.normal(size=(1, 5)), rng.normal(size=1))
    return net.replace(head=net.head.to_detector(bg))


def test_score_regions_requires_detector(partition):
    net = init_network(partition, 16, (6, 5))
    with pytest.raises(ValidationError):
        score_regions(net, np.zeros((8, 8)), [Box(0, 0, 4, 4)])


def test_score_zero_background_equals_raw(partition):
    net = detector(partition)
    net = net.replace(head=net.head.replace(background=WeightMatrix.zeros(1, 5)))
    img = np.random.default_rng(1).uniform(size=(8, 8))
    boxes = [Box(0, 0, 4, 4), Box(2, 2, 8, 8)]
    raw = forward(net, np.stack([warp_region(img, b, 2, 4) for b in boxes]))
    np.testing.assert_array_equal(score_regions(net, img, boxes), raw[:, :3])


def test_score_bias_shift_invariance(partition):
    net = detector(partition, 2)
    img = np.random.default_rng(3).uniform(size=(8, 8))
    boxes = [Box(0, 0, 4, 4), Box(1, 2, 7, 8)]
    h = net.head
    c = 1.75
    shifted = h.replace(
        fcA=WeightMatrix(h.fcA.values, h.fcA.bias + c),
        fcB=WeightMatrix(h.fcB.values, h.fcB.bias + c),
        background=WeightMatrix(h.background.values, h.background.bias + c),
    )
    np.testing.assert_allclose(score_regions(net, img, boxes),
                               score_regions(net.replace(head=shifted), img, boxes), atol=1e-12)


def test_score_hand_built_affine():
    partition = CategoryPartition.create(["a", "b"], 1)
    layer = WeightMatrix(np.full((1, 4), 0.5), [0.25])
    head = OutputHead.classification(WeightMatrix([[2.0], [-1.0]], [1.0, 0.5]), 1).to_detector(
        WeightMatrix([[3.0]], [-2.0]))
    net = NetworkParams((layer,), head, partition)
    img = np.full((6, 6), 0.4)
    # warp of a constant image is constant 0.4; hidden = relu(4*0.5*0.4 + 0.25) = 1.05
    got = score_regions(net, img, [Box(1, 1, 5, 5)])
    h = 1.05
    bg = 3.0 * h - 2.0
    np.testing.assert_allclose(got, [[2.0 * h + 1.0 - bg, -1.0 * h + 0.5 - bg]], atol=1e-12)


def test_softmax_scores_differ_from_logits(partition):
    net = detector(partition, 4)
    img = np.random.default_rng(0).uniform(size=(8, 8))
    p = score_regions(net, img, [Box(0, 0, 8, 8)], softmax=True)
    assert np.all(np.abs(p) <= 1.0)


def glyph_image():
    img = np.zeros((32, 32))
    img[9:21, 12:24] = 1.0
    return img


def oracle_net():
    """Hand-set detector whose single feature peaks on a tight box around a lit square.

    With context pad 2 and an 8x8 warp, the outer ring of the warped crop samples
    the padding and the inner 6x6 samples the box.  The feature is
    relu(mean(inner) - mean(ring)), which is 1 only when the box fits the square.
    """
    partition = CategoryPartition.create(["a", "b"], 1)
    ring = np.ones((8, 8), bool)
    ring[1:-1, 1:-1] = False
    w = np.where(ring, -1.0 / ring.sum(), 1.0 / (~ring).sum()).reshape(1, 64)
    layer = WeightMatrix(w, [0.0])
    head = OutputHead.classification(WeightMatrix([[10.0], [0.0]], [0.0, -100.0]), 1).to_detector(
        WeightMatrix([[0.0]], [5.0]))
    return NetworkParams((layer,), head, partition)


def test_detect_image_finds_glyph():
    cfg = ProposalConfig(scales=(8, 12, 16), stride_fraction=0.25)
    dets = detect_image(oracle_net(), glyph_image(), "g", cfg, context_pad=2)
    top = [x for x in dets if x.category == 0][0]
    assert iou(top.box, Box(12, 9, 24, 21)) >= 0.5
    assert dets == detect_image(oracle_net(), glyph_image(), "g", cfg, context_pad=2)
    scores = [x.score for x in dets]
    assert scores == sorted(scores, reverse=True)
    props = set(grid_proposals((32, 32), cfg))
    assert all(x.box in props for x in dets)
    assert len([x for x in dets if x.category == 0]) <= len(props)


def test_detect_image_floor_empties():
    cfg = ProposalConfig(scales=(16,), stride_fraction=0.5)
    assert detect_image(oracle_net(), glyph_image(), "g", cfg, score_floor=1e9) == []


def test_detection_file_round_trip(tmp_path):
    names = ("a", "b")
    dets = [d(0.1 + 1e-17, (0, 0, 3, 3), 1, "x"), d(-2.5, (1, 1, 4, 9), 0, "y")]
    write_detections(dets, names, tmp_path / "d.tsv")
    assert read_detections(tmp_path / "d.tsv", names) == dets


def test_scoring_throughput_linear():
    partition = CategoryPartition.create(list("abcdefgh"), 4)
    net = init_network(partition, 1024, (256, 64, 64), seed=0)
    net = net.replace(head=net.head.to_detector())
    img = np.random.default_rng(0).uniform(size=(64, 64))
    boxes = grid_proposals((64, 64), ProposalConfig())
    # same box mix at both sizes, since warp cost depends on crop size
    small = boxes[::11][:40]
    large = small * 10

    def best_time(bs):
        times = []
        for _ in range(7):
            t = time.perf_counter()
            score_regions(net, img, bs)
            times.append(time.perf_counter() - t)
        return min(times)

    best_time(small)
    assert best_time(large) <= 12 * best_time(small)
