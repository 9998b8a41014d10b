"""Tests for the tile classifier, slide-level max pooling, and segmentation net."""

import numpy as np
import pytest

from tilewise_xai.engine import Tensor, backward, finite_difference_check
from tilewise_xai.metrics import mann_whitney_auc
from tilewise_xai.nets import (
    MilModel,
    NetError,
    SegNet,
    TileClassifier,
    dice_loss,
    dice_loss_graph,
    mask_to_onehot,
    mil_forward,
    mil_train_epoch,
    mil_train_step,
    pretrain_epoch,
    pretrain_step,
    seg_train_epoch,
    seg_train_step,
)
from tilewise_xai.nets.classifier import _bag_loss_graph
from tilewise_xai.synthdata import GridSpec, SlideParams, generate_slide, tile_grid


def tiny_classifier(seed: int = 3) -> TileClassifier:
    return TileClassifier(tile_size=16, conv_widths=(4, 6), pool_after=(1, 2),
                          head_widths=(8,), seed=seed)


def random_tile(rng, size: int = 16) -> np.ndarray:
    return rng.uniform(0.0, 255.0, size=(size, size, 3))


SEG_PARAMS = SlideParams(size=256, tile_size=64, lesion_count=2,
                         lesion_radius_range=(26.0, 34.0), boundary_band=6.0)


def slide_tiles(seeds, params=SEG_PARAMS):
    tiles, masks = [], []
    for seed in seeds:
        slide = generate_slide(seed, params)
        for t in tile_grid(slide, GridSpec(tile_size=params.tile_size)).tiles:
            tiles.append(t.image)
            masks.append(t.mask)
    return tiles, masks


class TestTileClassifier:
    """Forward contract: probability output, determinism, shape checks."""

    def test_score_is_positive_class_probability(self):
        rng = np.random.default_rng(0)
        clf = tiny_classifier()
        for _ in range(5):
            tile = random_tile(rng)
            probs = clf.probabilities(tile)
            assert probs.shape == (2,)
            assert abs(probs.sum() - 1.0) < 1e-12
            assert np.all(probs > 0.0)
            assert clf.classify_tile(tile) == probs[1]

    def test_scores_lie_in_unit_interval(self):
        rng = np.random.default_rng(1)
        clf = tiny_classifier()
        for _ in range(20):
            s = clf.classify_tile(random_tile(rng))
            assert 0.0 <= s <= 1.0

    def test_zeroed_output_layer_scores_half(self):
        # symmetric logits (0, 0) must give exactly 0.5
        clf = tiny_classifier()
        clf.params["out.w"][:] = 0.0
        clf.params["out.b"][:] = 0.0
        tile = random_tile(np.random.default_rng(2))
        assert clf.classify_tile(tile) == 0.5

    def test_same_seed_same_weights_same_score(self):
        rng = np.random.default_rng(3)
        tile = random_tile(rng)
        a = tiny_classifier(seed=7)
        b = tiny_classifier(seed=7)
        for name in a.params:
            assert a.params[name].tobytes() == b.params[name].tobytes()
        assert a.classify_tile(tile) == b.classify_tile(tile)
        assert a.classify_tile(tile) == a.classify_tile(tile)

    def test_rejects_wrong_tile_shape(self):
        clf = tiny_classifier()
        with pytest.raises(NetError):
            clf.classify_tile(np.zeros((8, 8, 3)))
        with pytest.raises(NetError):
            clf.classify_tile(np.zeros((16, 16)))

    def test_rejects_bad_architecture(self):
        with pytest.raises(NetError):
            TileClassifier(tile_size=10, conv_widths=(4,), pool_after=(1, 1))
        with pytest.raises(NetError):
            TileClassifier(tile_size=6, conv_widths=(4, 4), pool_after=(1, 2))
        with pytest.raises(NetError):
            TileClassifier(conv_widths=(4,), pool_after=(3,))

    def test_feature_vector_feeds_head(self):
        clf = tiny_classifier()
        tile = random_tile(np.random.default_rng(4))
        feat = clf.features(tile)
        assert feat.shape == (clf.feature_dim,)

    def test_attribution_pass_taps_every_conv_layer(self):
        clf = tiny_classifier()
        tile = random_tile(np.random.default_rng(5))
        s, taps = clf.attribution_pass(tile)
        assert s == clf.classify_tile(tile)
        assert sorted(taps) == [1, 2]
        act1, grad1 = taps[1]
        assert act1.shape == (16, 16, 4)
        assert grad1.shape == (16, 16, 4)
        act2, grad2 = taps[2]
        assert act2.shape == (8, 8, 6)

    def test_attribution_locality_follows_head_wiring(self):
        """Zeroing the head weights of the top-left pooled cells kills the
        final-layer gradient exactly there and nowhere else."""
        clf = TileClassifier(seed=11)  # desk scale: 4x4x32 pooled output
        side = clf.tile_size // 2 ** len(clf.pool_after)
        width = clf.conv_widths[-1]
        for i in (0, 1):
            for j in (0, 1):
                for c in range(width):
                    clf.params["fc1.w"][:, (i * side + j) * width + c] = 0.0
        tile = random_tile(np.random.default_rng(6), size=clf.tile_size)
        _, taps = clf.attribution_pass(tile)
        last = len(clf.conv_widths)
        act, grad = taps[last]
        assert np.array_equal(grad[0:4, 0:4, :], np.zeros((4, 4, width)))
        assert np.any(grad[4:, 4:, :] != 0.0)


class TestMilForward:
    """Slide score equals the brute-force max over tile scores."""

    def test_matches_brute_force_on_random_bags(self):
        rng = np.random.default_rng(10)
        clf = tiny_classifier(seed=1)
        model = MilModel(clf)
        for _ in range(50):
            bag = [random_tile(rng) for _ in range(int(rng.integers(1, 7)))]
            slide_score, idx, tile_scores = mil_forward(model, bag)
            brute = [clf.classify_tile(im) for im in bag]
            assert tile_scores == brute
            assert slide_score == max(brute)
            assert idx == int(np.argmax(brute))

    def test_known_scores_pick_the_maximum(self):
        class Fixed:
            def classify_tile(self, tile):
                return float(tile[0, 0, 0])

        model = MilModel(Fixed())
        bag = [np.full((1, 1, 3), v) for v in (0.2, 0.9, 0.5)]
        assert mil_forward(model, bag) == (0.9, 1, [0.2, 0.9, 0.5])

    def test_single_tile_bag_returns_that_score(self):
        clf = tiny_classifier()
        tile = random_tile(np.random.default_rng(11))
        s, idx, scores = mil_forward(MilModel(clf), [tile])
        assert (s, idx) == (clf.classify_tile(tile), 0)
        assert scores == [s]

    def test_tie_resolves_to_lowest_index(self):
        clf = tiny_classifier()
        clf.params["out.w"][:] = 0.0
        clf.params["out.b"][:] = 0.0
        rng = np.random.default_rng(12)
        bag = [random_tile(rng) for _ in range(4)]
        s, idx, scores = mil_forward(MilModel(clf), bag)
        assert scores == [0.5] * 4
        assert (s, idx) == (0.5, 0)

    def test_empty_bag_rejected(self):
        with pytest.raises(NetError):
            mil_forward(MilModel(tiny_classifier()), [])


class TestMilTraining:
    def test_loss_decreases_on_repeated_steps(self):
        rng = np.random.default_rng(20)
        model = MilModel(tiny_classifier(seed=2))
        bag = [random_tile(rng) for _ in range(3)]
        losses = [mil_train_step(model, bag, 1, 0.05) for _ in range(6)]
        assert losses[-1] < losses[0]
        # the same bag labelled 0 trains the other way
        model2 = MilModel(tiny_classifier(seed=2))
        l0 = [mil_train_step(model2, bag, 0, 0.05) for _ in range(6)]
        assert l0[-1] < l0[0]

    def test_rejects_bad_label_rate_and_empty_bag(self):
        model = MilModel(tiny_classifier())
        bag = [random_tile(np.random.default_rng(21))]
        with pytest.raises(NetError):
            mil_train_step(model, bag, 2, 0.1)
        with pytest.raises(NetError):
            mil_train_step(model, bag, 1, 0.0)
        with pytest.raises(NetError):
            mil_train_step(model, [], 1, 0.1)
        with pytest.raises(NetError):
            mil_train_epoch(model, [bag], [], 0.1)

    def test_non_argmax_tiles_get_exactly_zero_gradient(self):
        rng = np.random.default_rng(22)
        clf = tiny_classifier(seed=5)
        bag = [random_tile(rng) for _ in range(4)]
        pt = clf._wrap_params()
        leaves, scores = zip(*[clf.score_graph(im, pt) for im in bag])
        loss = _bag_loss_graph(list(scores), 1)
        backward(loss)
        winner = int(np.argmax([s.item() for s in scores]))
        for j, leaf in enumerate(leaves):
            if j == winner:
                assert np.any(leaf.gradient != 0.0)
            else:
                assert np.array_equal(leaf.gradient, np.zeros(leaf.data.shape))

    def test_frozen_backbone_stays_bit_identical(self):
        rng = np.random.default_rng(23)
        clf = tiny_classifier(seed=6)
        clf.frozen_backbone = True
        model = MilModel(clf)
        before = {n: clf.params[n].tobytes() for n in clf.backbone_names()}
        head_before = {n: clf.params[n].tobytes() for n in clf.head_names()}
        bags = [[random_tile(rng) for _ in range(3)] for _ in range(4)]
        mil_train_epoch(model, bags, [1, 0, 1, 0], 0.1)
        for name, blob in before.items():
            assert clf.params[name].tobytes() == blob
        assert any(clf.params[n].tobytes() != head_before[n]
                   for n in clf.head_names())

    def test_frozen_and_full_graph_agree_on_the_loss(self):
        # the cached-feature path must be arithmetically the same forward
        rng = np.random.default_rng(24)
        bag = [random_tile(rng) for _ in range(3)]
        a = MilModel(tiny_classifier(seed=8))
        b = MilModel(tiny_classifier(seed=8))
        b.classifier.frozen_backbone = True
        assert mil_train_step(a, bag, 1, 1e-9) == mil_train_step(b, bag, 1, 1e-9)

    def test_head_and_conv_gradients_match_finite_differences(self):
        """Bag loss gradients agree with central differences, rel err < 1e-4."""
        rng = np.random.default_rng(25)
        clf = TileClassifier(tile_size=8, conv_widths=(3, 4), pool_after=(1, 2),
                             head_widths=(6,), seed=9)
        for name in clf.params:  # lift biases off exact zero
            clf.params[name] += rng.normal(0.0, 0.05, size=clf.params[name].shape)
        bag = [random_tile(rng, size=8) for _ in range(3)]
        pt = clf._wrap_params()
        leaves, scores = zip(*[clf.score_graph(im, pt) for im in bag])
        vals = sorted(s.item() for s in scores)
        assert vals[-1] - vals[-2] > 1e-4  # clear argmax margin for the probe
        loss = _bag_loss_graph(list(scores), 1)
        for name in ("fc1.w", "out.w", "conv1.w", "conv2.b"):
            assert finite_difference_check(loss, pt[name], 1e-6) < 1e-4
        winner = int(np.argmax([s.item() for s in scores]))
        # pixel values are O(100), so the probe step scales up accordingly
        assert finite_difference_check(loss, leaves[winner], 1e-3) < 1e-4

    def test_pretraining_on_tile_labels_reduces_loss(self):
        rng = np.random.default_rng(26)
        clf = tiny_classifier(seed=10)
        tiles = [random_tile(rng) for _ in range(6)]
        labels = [0, 1, 0, 1, 0, 1]
        first = pretrain_epoch(clf, tiles, labels, 0.02)
        last = first
        for _ in range(4):
            last = pretrain_epoch(clf, tiles, labels, 0.02)
        assert last < first
        with pytest.raises(NetError):
            pretrain_step(clf, tiles[0], 3, 0.02)


class TestClassifierCheckpoint:
    def test_round_trip_preserves_predictions(self, tmp_path):
        rng = np.random.default_rng(30)
        clf = tiny_classifier(seed=4)
        tile = random_tile(rng)
        path = tmp_path / "clf.json"
        clf.save(path, extra={"aux": np.arange(3.0)})
        loaded, extra = TileClassifier.load(path)
        assert loaded.tile_size == clf.tile_size
        assert loaded.conv_widths == clf.conv_widths
        assert loaded.pool_after == clf.pool_after
        assert loaded.classify_tile(tile) == clf.classify_tile(tile)
        assert np.array_equal(extra["aux"], np.arange(3.0))

    def test_head_reinit_changes_only_head(self):
        a = tiny_classifier(seed=4)
        backbone = {n: a.params[n].tobytes() for n in a.backbone_names()}
        head = {n: a.params[n].tobytes() for n in a.head_names()}
        a.reinit_head(seed=99)
        assert all(a.params[n].tobytes() == backbone[n] for n in a.backbone_names())
        assert any(a.params[n].tobytes() != head[n] for n in a.head_names())


class TestDiceLoss:
    """Hand-checked dice values plus the range property."""

    def test_perfect_prediction_scores_zero(self):
        mask = np.zeros((4, 4), dtype=bool)
        mask[1:3, 1:3] = True
        target = mask_to_onehot(mask)
        assert abs(dice_loss(target, target)) < 1e-12

    def test_all_wrong_on_supported_class_scores_one(self):
        # prediction puts everything on class 1 while class 0 has support
        pred = np.zeros((2, 2, 2))
        pred[:, :, 1] = 1.0
        target = np.zeros((2, 2, 2))
        target[:, :, 0] = 1.0
        assert abs(dice_loss(pred, target) - 1.0) < 1e-12

    def test_single_class_half_half_case(self):
        pred = np.array([0.5, 0.5]).reshape(1, 2, 1)
        target = np.array([1.0, 0.0]).reshape(1, 2, 1)
        want = 1.0 - 1.0 / 1.5
        assert abs(dice_loss(pred, target) - want) < 1e-12

    def test_empty_class_contributes_zero(self):
        # both classes predicted perfectly, class 0 absent everywhere
        pred = np.zeros((3, 3, 2))
        pred[:, :, 1] = 1.0
        target = pred.copy()
        assert dice_loss(pred, target) == 0.0

    def test_range_on_random_inputs(self):
        rng = np.random.default_rng(31)
        for _ in range(200):
            h, w = int(rng.integers(1, 5)), int(rng.integers(1, 5))
            pred = rng.uniform(0.0, 1.0, size=(h, w, 2))
            labels = rng.integers(0, 2, size=(h, w)).astype(bool)
            loss = dice_loss(pred, mask_to_onehot(labels))
            assert 0.0 <= loss <= 1.0

    def test_rejects_bad_inputs(self):
        pred = np.full((2, 2, 2), 0.5)
        with pytest.raises(NetError):
            dice_loss(pred, np.ones((2, 2, 2)))  # not one-hot per pixel
        with pytest.raises(NetError):
            dice_loss(pred, np.zeros((3, 3, 2)))  # shape mismatch
        with pytest.raises(NetError):
            dice_loss(pred * 3.0, mask_to_onehot(np.zeros((2, 2), dtype=bool)))

    def test_graph_form_matches_plain_value_and_gradient(self):
        rng = np.random.default_rng(32)
        from tilewise_xai.engine import softmax

        for _ in range(5):
            logits = Tensor(rng.normal(0.0, 1.0, size=(3, 4, 2)))
            probs = softmax(logits)
            labels = rng.integers(0, 2, size=(3, 4)).astype(bool)
            target = mask_to_onehot(labels)
            loss = dice_loss_graph(probs, target)
            assert abs(loss.item() - dice_loss(probs.data, target)) < 1e-12
            assert finite_difference_check(loss, logits, 1e-6) < 1e-4


class TestSegNet:
    def test_output_shape_and_per_pixel_simplex(self):
        net = SegNet(base_width=4, seed=1)
        tile = np.random.default_rng(40).uniform(0, 255, size=(16, 24, 3))
        probs = net.predict(tile)
        assert probs.shape == (16, 24, 2)
        assert np.allclose(probs.sum(axis=2), 1.0, atol=1e-12)
        assert np.array_equal(net.lesion_probability(tile), probs[:, :, 0])
        assert np.array_equal(net.predicted_mask(tile), probs.argmax(axis=2) == 0)

    def test_untrained_predictions_near_uniform(self):
        net = SegNet(base_width=8, seed=2)
        tile = np.random.default_rng(41).uniform(0, 255, size=(32, 32, 3))
        probs = net.predict(tile)
        assert np.all(np.abs(probs - 0.5) < 0.2)
        net.params["out.w"][:] = 0.0  # exactly symmetric output layer
        assert np.array_equal(net.predict(tile), np.full((32, 32, 2), 0.5))

    def test_rejects_bad_spatial_shape(self):
        net = SegNet(base_width=4)
        with pytest.raises(NetError):
            net.predict(np.zeros((15, 16, 3)))
        with pytest.raises(NetError):
            net.predict(np.zeros((16, 16)))

    def test_checkpoint_round_trip(self, tmp_path):
        net = SegNet(base_width=4, seed=3)
        tile = np.random.default_rng(42).uniform(0, 255, size=(16, 16, 3))
        net.save(tmp_path / "seg.json", extra={"stain.max_conc": np.ones(2)})
        loaded, extra = SegNet.load(tmp_path / "seg.json")
        assert np.array_equal(loaded.predict(tile), net.predict(tile))
        assert np.array_equal(extra["stain.max_conc"], np.ones(2))


class TestSegTraining:
    """Training curves on small synthetic slides; fixed seeds keep it stable."""

    def test_loss_decreases_over_first_five_epochs(self):
        tiles, masks = slide_tiles(range(40, 46))
        net = SegNet(base_width=8, seed=5)
        losses = [seg_train_epoch(net, tiles[:24], masks[:24], 0.05)
                  for _ in range(5)]
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_held_out_pixel_auc_after_two_hundred_tiles(self):
        tiles, masks = slide_tiles(range(300, 350))
        assert len(tiles) >= 200
        tiles, masks = tiles[:200], masks[:200]
        net = SegNet(base_width=8, seed=5)
        for _ in range(4):
            seg_train_epoch(net, tiles, masks, 0.05)
        ho_tiles, ho_masks = slide_tiles(range(400, 408))
        pos, neg = [], []
        for im, mk in zip(ho_tiles, ho_masks):
            p = net.lesion_probability(im)[::5, ::5].ravel()
            g = mk[::5, ::5].ravel()
            pos.append(p[g])
            neg.append(p[~g])
        auc = mann_whitney_auc(np.concatenate(pos), np.concatenate(neg))
        assert auc > 0.9

    def test_single_tile_step_reduces_loss(self):
        tiles, masks = slide_tiles(range(46, 48))
        lesioned = [i for i, m in enumerate(masks) if m.mean() > 0.1][0]
        net = SegNet(base_width=4, seed=6)
        tile, mask = tiles[lesioned], masks[lesioned]
        losses = [seg_train_step(net, tile, mask, 0.1) for _ in range(8)]
        assert losses[-1] < losses[0]

    def test_epoch_input_validation(self):
        net = SegNet(base_width=4)
        with pytest.raises(NetError):
            seg_train_epoch(net, [], [], 0.1)
        with pytest.raises(NetError):
            seg_train_step(net, np.zeros((8, 8, 3)), np.zeros((8, 8), dtype=bool), 0.0)
