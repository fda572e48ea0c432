import json
from itertools import permutations

import pytest
from conftest import check_golden
from hypothesis import given, settings
from hypothesis import strategies as st

from icca.core import GRID_LABELS, LETTER_LABELS, ContextView, ImageRef, Role, TrialRecord
from icca.corpus import generate_synthetic
from icca.promptkit import (
    VARIANTS,
    ContextPolicy,
    CurrentTrial,
    HistoryPolicy,
    Manipulation,
    PromptError,
    SegmentKind,
    TemplateError,
    Templates,
    apply_manipulation,
    assign_labels,
    build_prompt,
    derive_rng,
    displays_context,
    get_variant,
    merge_grid,
    peak_image_count,
    plan_views,
    render_feedback,
)

IDS = ("img1", "img2", "img3", "img4")
IMAGES = {i: ImageRef(i) for i in IDS}


@pytest.mark.parametrize("name,peak", [("L1", 96), ("L4", 96), ("L2", 4), ("L3", 4), ("L5", 4),
                                       ("L6", 4), ("L7", 20), ("S1", 4)])
def test_peak_image_counts(name, peak):
    assert peak_image_count(get_variant(name)) == peak
    assert peak_image_count(get_variant(name), grid=True) == peak // 4


def test_speaker_variants_differ_only_in_instruction():
    shapes = {(v.context_policy, v.manipulation, v.history_policy) for k, v in VARIANTS.items() if k[0] == "S"}
    assert len(shapes) == 1
    assert len({VARIANTS[k].instruction for k in ("S1", "S2", "S3", "S4")}) == 4


def test_l7_redisplays_only_last_repetition():
    v = get_variant("L7")
    assert [t for t in range(1, 25) if displays_context(v, t)] == [1, 21, 22, 23, 24]


def test_unknown_variant():
    with pytest.raises(KeyError):
        get_variant("L9")


def test_derive_rng_is_scoped():
    a = derive_rng(0, "x", 1).random()
    assert a == derive_rng(0, "x", 1).random()
    assert a != derive_rng(0, "x", 2).random()
    assert a != derive_rng(1, "x", 1).random()


def test_label_permutation_golden():
    rows = {t: list(assign_labels("fixture", t, ContextPolicy.EVERY_TRIAL_SHUFFLED, 0).permutation)
            for t in range(1, 25)}
    check_golden("label_permutations.json", json.dumps(rows, indent=1) + "\n")


def test_non_shuffled_policies_keep_identity():
    for policy in (ContextPolicy.ONCE_AT_START, ContextPolicy.EVERY_TRIAL_FIXED):
        assert assign_labels("x", 7, policy, 3).permutation == (0, 1, 2, 3)


@given(seed=st.integers(0, 10_000), t=st.integers(1, 24))
@settings(max_examples=200, deadline=None)
def test_mislead_moves_images_but_not_labels(seed, t):
    gold = ContextView(IDS)
    shown = apply_manipulation(gold, Manipulation.MISLEAD_ALL, t, seed, "x")
    assert shown.labels == gold.labels
    assert sorted(shown.slots) == sorted(gold.slots)
    assert shown.slots != gold.slots


def test_gold_schedule_identical_between_l3_and_l6():
    for t in range(1, 25):
        g3, _ = plan_views(get_variant("L3"), "i", IDS, t, 5)
        g6, s6 = plan_views(get_variant("L6"), "i", IDS, t, 5)
        assert (g3.slots, g3.labels) == (g6.slots, g6.labels)
        assert s6.slots != g6.slots


def test_l7_only_misleads_last_repetition():
    v = get_variant("L7")
    for t in range(1, 25):
        gold, shown = plan_views(v, "i", IDS, t, 1)
        assert (shown.slots != gold.slots) == (t >= 21)


def test_mask_marks_view():
    gold, shown = plan_views(get_variant("L5"), "i", IDS, 1, 0)
    assert shown.masked and not gold.masked and shown.slots == gold.slots


def test_all_24_permutations_reachable():
    seen = {assign_labels("x", t, ContextPolicy.EVERY_TRIAL_SHUFFLED, s).permutation
            for s in range(60) for t in range(1, 25)}
    assert seen == set(permutations(range(4)))


# -- feedback and templates -----------------------------------------------------------------

def test_feedback_phrasing():
    assert render_feedback("B", "B", Role.LISTENER) == "Correct. I was referring to Image B."
    assert render_feedback("A", "B", Role.LISTENER) == "Wrong. I was referring to Image B."
    assert render_feedback("B", "B", Role.SPEAKER) == "The listener correctly answered Image B."
    assert render_feedback("C", "B", Role.SPEAKER) == "The listener mistakenly answered Image C."
    assert "did not choose a valid image" in render_feedback("INVALID", "B", Role.SPEAKER)
    assert render_feedback("top left", "top left", Role.LISTENER) == "Correct. I was referring to the top left image."


def test_template_override_and_validation(tmp_path):
    (tmp_path / "question.txt").write_text("Which one: {message}\n")
    tpl = Templates.load(tmp_path)
    assert tpl.fmt("question", message="x") == "Which one: x"
    assert tpl.texts["listener"] == Templates.load().texts["listener"]
    assert tpl.digest() != Templates.load().digest()
    (tmp_path / "question.txt").write_text("Which one: {target}\n")
    with pytest.raises(TemplateError):
        Templates.load(tmp_path)
    with pytest.raises(TemplateError):
        Templates.from_mapping({"nonsense": "x"})
    with pytest.raises(TemplateError):
        Templates.load(tmp_path / "absent")


def test_instructions_differ_and_speakers_escalate():
    tpl = Templates.load()
    s = [tpl.texts[f"speaker_S{k}"] for k in range(1, 5)]
    assert len(set(s)) == 4
    assert all(len(s[0]) < len(x) for x in s[1:])
    assert len(s[2]) < len(s[3])


# -- grid ---------------------------------------------------------------------------------

def test_grid_merge_layout(tiny):
    view = ContextView(tiny.image_ids, GRID_LABELS)
    merged = merge_grid(view, tiny.images())
    w, h = tiny.context_images[0].load().size
    assert merged.raster.size == (2 * w, 2 * h)
    for k, image_id in enumerate(view.slots):
        row, col = divmod(k, 2)
        expected = tiny.images()[image_id].load().getpixel((0, 0))
        assert merged.raster.getpixel((col * w, row * h)) == expected
    assert merged.position_of(tiny.image_ids[3]) == "bottom right"
    black = merge_grid(view, tiny.images(), masked=True).raster
    assert black.getextrema() == ((0, 0), (0, 0), (0, 0))


# -- prompts ------------------------------------------------------------------------------

def _history(n):
    inter = generate_synthetic(0, "converging")
    return inter, list(inter.trials[:n])


def _listener_prompt(variant_name, t, grid=False, seed=0):
    inter = generate_synthetic(0, "converging")
    variant = get_variant(variant_name)
    ids = tuple(sorted(inter.image_ids))
    history = []
    for k in range(1, t):
        gold, shown = plan_views(variant, inter.id, ids, k, seed, grid=grid)
        rec = inter.trials[k - 1]
        history.append(TrialRecord(k, gold, rec.target_id, rec.speaker_message, gold.label_of(rec.target_id),
                                   "x", display=shown if shown != gold else None))
    gold, shown = plan_views(variant, inter.id, ids, t, seed, grid=grid)
    if variant.history_policy is HistoryPolicy.NONE:
        history = []
    return build_prompt(variant, history, CurrentTrial(t, shown, message="the thing"), Role.LISTENER,
                        images=inter.images(), grid=grid)


def test_l1_trial_24_has_96_images():
    assert _listener_prompt("L1", 24).image_count == 96
    assert _listener_prompt("L1", 24, grid=True).image_count == 24


def test_l3_shows_context_once():
    for t in (1, 2, 13, 24):
        assert _listener_prompt("L3", t).image_count == 4


def test_l2_has_no_history():
    p = _listener_prompt("L2", 9)
    assert p.image_count == 4
    assert not any(s.trial is not None and s.trial < 9 for s in p.segments)


def test_prompt_is_pure():
    assert _listener_prompt("L4", 10).digest() == _listener_prompt("L4", 10).digest()


def test_history_must_be_in_order():
    inter, hist = _history(3)
    view = ContextView(tuple(sorted(inter.image_ids)))
    with pytest.raises(PromptError):
        build_prompt(get_variant("L3"), [hist[1], hist[0]], CurrentTrial(3, view, message="m"),
                     Role.LISTENER, images=inter.images())
    with pytest.raises(PromptError):
        build_prompt(get_variant("L2"), hist, CurrentTrial(4, view, message="m"),
                     Role.LISTENER, images=inter.images())


def test_missing_image_is_an_error():
    inter, _ = _history(0)
    view = ContextView(tuple(sorted(inter.image_ids)))
    with pytest.raises(PromptError, match="must be displayed"):
        build_prompt(get_variant("L3"), [], CurrentTrial(1, view, message="m"), Role.LISTENER, images={})


def test_listener_prompt_text_shape():
    text = _listener_prompt("L3", 2).render_text()
    assert text.startswith("[System] ")
    assert "Image A: <image:" in text
    assert "[Listener] Image" in text
    assert text.rstrip().endswith("Which image is this message referring to: the thing")


def test_speaker_prompt_names_target_and_uses_speaker_feedback():
    inter = generate_synthetic(0, "converging")
    hist = list(inter.trials[:2])
    gold, shown = plan_views(get_variant("S3"), inter.id, tuple(sorted(inter.image_ids)), 3, 0)
    target = inter.trials[2].target_id
    p = build_prompt(get_variant("S3"), hist, CurrentTrial(3, shown, target_id=target), Role.SPEAKER,
                     images=inter.images())
    text = p.render_text()
    assert f"Trial 3, the target is Image {gold.label_of(target)}." in text
    assert "The listener correctly answered" in text
    assert "[Speaker] Message: " in text
    assert text.startswith("[System] " + Templates.load().texts["speaker_S3"][:20])


def test_segment_payload_rules():
    from icca.promptkit import PromptSegment

    with pytest.raises(ValueError):
        PromptSegment(SegmentKind.TEXT)
    with pytest.raises(ValueError):
        PromptSegment(SegmentKind.IMAGE, text="x")
    assert LETTER_LABELS == ("A", "B", "C", "D")
