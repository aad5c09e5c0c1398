import numpy as np
import pytest

from poseloop.errors import ParseError, ValidationError
from poseloop.skeleton import (
    SkeletonSpec,
    StackOrder,
    StructuralGroup,
    coco17_preset,
    crowdpose14_preset,
    format_skeleton,
    group_stack,
    load_skeleton,
)


@pytest.fixture(params=["coco17", "crowdpose14"])
def preset(request):
    return {"coco17": coco17_preset, "crowdpose14": crowdpose14_preset}[request.param]()


class TestPresets:
    def test_coco_terminals_are_ears_wrists_ankles(self):
        spec = coco17_preset()
        names = {spec.keypoint_names[i] for i in spec.terminal_indices}
        assert names == {
            "left_ear", "right_ear", "left_wrist", "right_wrist",
            "left_ankle", "right_ankle",
        }

    def test_coco_group_count(self):
        assert len(coco17_preset().groups) == 6

    def test_crowdpose_group_count(self):
        assert len(crowdpose14_preset().groups) == 4

    def test_crowdpose_terminals(self):
        spec = crowdpose14_preset()
        names = {spec.keypoint_names[i] for i in spec.terminal_indices}
        assert names == {"left_wrist", "right_wrist", "left_ankle", "right_ankle"}

    def test_groups_have_four_distinct_members(self, preset):
        for g in preset.groups:
            assert len(set(g.members)) == 4

    def test_union_covers_all_keypoints(self, preset):
        covered = set()
        for g in preset.groups:
            covered.update(g.members)
        assert covered == set(range(preset.num_keypoints))

    def test_terminal_never_in_a_slot(self, preset):
        a_slots = {g.a for g in preset.groups}
        for g in preset.groups:
            assert g.terminal not in a_slots

    def test_oks_k_positive_and_sized(self, preset):
        assert len(preset.oks_k) == preset.num_keypoints
        assert all(v > 0 for v in preset.oks_k)

    def test_mirror_consistency(self, preset):
        by_name = {g.name: g for g in preset.groups}
        for g in preset.groups:
            if not g.name.endswith("_left"):
                continue
            partner = by_name[g.name.replace("_left", "_right")]
            flipped = {preset.flipped_index(i) for i in g.members}
            assert flipped == set(partner.members)


class TestLoadSkeleton:
    def test_roundtrip(self, preset):
        assert load_skeleton(format_skeleton(preset)) == preset

    def test_group_size_error(self):
        text = (
            "name = tiny\n"
            "keypoints = a, b, c, d, e, f, g, h\n"
            "oks_k = 1, 1, 1, 1, 1, 1, 1, 1\n"
            "group g1 = a, b | c\n"
        )
        with pytest.raises(ValidationError, match="group size"):
            load_skeleton(text)

    def test_uncovered_keypoint_error(self):
        text = (
            "name = tiny\n"
            "keypoints = a, b, c, d, e\n"
            "oks_k = 1, 1, 1, 1, 1\n"
            "group g1 = a, b, c | d\n"
        )
        with pytest.raises(ValidationError, match="uncovered keypoint"):
            load_skeleton(text)

    def test_duplicate_member_error(self):
        text = (
            "name = tiny\n"
            "keypoints = a, b, c, d\n"
            "oks_k = 1, 1, 1, 1\n"
            "group g1 = a, b, b | d\n"
        )
        with pytest.raises(ValidationError, match="duplicate index in group"):
            load_skeleton(text)

    def test_non_positive_k_error(self):
        text = (
            "name = tiny\n"
            "keypoints = a, b, c, d\n"
            "oks_k = 1, 0, 1, 1\n"
            "group g1 = a, b, c | d\n"
        )
        with pytest.raises(ValidationError, match="non-positive k_i"):
            load_skeleton(text)

    def test_unknown_keypoint_name(self):
        text = (
            "name = tiny\n"
            "keypoints = a, b, c, d\n"
            "oks_k = 1, 1, 1, 1\n"
            "group g1 = a, b, zz | d\n"
        )
        with pytest.raises(ParseError, match="zz"):
            load_skeleton(text)

    def test_malformed_line(self):
        with pytest.raises(ParseError):
            load_skeleton("name coco\n")

    def test_comments_and_blanks_ignored(self):
        preset = coco17_preset()
        text = "# header\n\n" + format_skeleton(preset) + "\n# trailing\n"
        assert load_skeleton(text) == preset


class TestGroupStack:
    def make_heatmaps(self, spec):
        rng = np.random.default_rng(0)
        return [rng.standard_normal((8, 8)).astype(np.float32) for _ in range(spec.num_keypoints)]

    def test_for_phi_order(self):
        spec = coco17_preset()
        hms = self.make_heatmaps(spec)
        gi = next(i for i, g in enumerate(spec.groups) if g.name == "arm_left")
        g = spec.groups[gi]
        stack = group_stack(spec, gi, hms, StackOrder.FOR_PHI)
        names = spec.keypoint_names
        assert names[g.a] == "left_hip"
        assert names[g.b] == "left_shoulder"
        assert names[g.c] == "left_elbow"
        np.testing.assert_array_equal(stack[0], hms[g.a])
        np.testing.assert_array_equal(stack[1], hms[g.b])
        np.testing.assert_array_equal(stack[2], hms[g.c])

    def test_for_gamma_order(self):
        spec = coco17_preset()
        hms = self.make_heatmaps(spec)
        gi = next(i for i, g in enumerate(spec.groups) if g.name == "arm_left")
        g = spec.groups[gi]
        stack = group_stack(spec, gi, hms, StackOrder.FOR_GAMMA)
        names = spec.keypoint_names
        assert names[g.b] == "left_shoulder"
        assert names[g.c] == "left_elbow"
        assert names[g.terminal] == "left_wrist"
        np.testing.assert_array_equal(stack[0], hms[g.b])
        np.testing.assert_array_equal(stack[1], hms[g.c])
        np.testing.assert_array_equal(stack[2], hms[g.terminal])

    def test_order_sensitivity_on_swap(self):
        spec = coco17_preset()
        hms = self.make_heatmaps(spec)
        g = spec.groups[2]
        stack_before = group_stack(spec, 2, hms, StackOrder.FOR_PHI)
        hms[g.b], hms[g.c] = hms[g.c], hms[g.b]
        stack_after = group_stack(spec, 2, hms, StackOrder.FOR_PHI)
        np.testing.assert_array_equal(stack_before[1], stack_after[2])
        np.testing.assert_array_equal(stack_before[2], stack_after[1])

    def test_bad_group_index(self):
        spec = coco17_preset()
        hms = self.make_heatmaps(spec)
        with pytest.raises(IndexError):
            group_stack(spec, 99, hms, StackOrder.FOR_PHI)

    def test_wrong_heatmap_count(self):
        spec = coco17_preset()
        with pytest.raises(ValueError):
            group_stack(spec, 0, [np.zeros((8, 8))] * 5, StackOrder.FOR_PHI)


def test_terminal_in_a_slot_rejected():
    with pytest.raises(ValidationError, match="A-slot"):
        SkeletonSpec(
            "bad",
            ("a", "b", "c", "d"),
            (
                StructuralGroup("g1", (0, 1, 2), 3),
                StructuralGroup("g2", (3, 1, 2), 0),
            ),
            (1.0, 1.0, 1.0, 1.0),
        )
