"""Interleaved sample construction over the synthetic world.

Stage semantics mirror the real pipeline: ``stage="crop"`` gives reference
images the *same* pose draw as the queried scene (the cropped-from-the-test
regime), ``stage="shot"`` draws fresh poses (reference from a different shot).
Held-out samples use identities the training split never sees.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ..errors import AssemblyError, ConfigError, ValidationError
from ..numerics import atomic_write_text
from .vocab import EOT, OPTION_WORDS, SLOT_WORDS, Vocab
from .world import SLOT_NAMES, SyntheticWorld

TASK_KINDS = ("matching", "location", "qa", "caption")
STAGES = ("crop", "shot")

DEFAULT_TASK_MIX = {"qa": 0.4, "location": 0.2, "caption": 0.2, "matching": 0.2}


@dataclass(frozen=True)
class PromptSegment:
    """Either a run of text token ids or a single image slot reference."""

    kind: str  # "text" | "id_slot" | "test_slot"
    tokens: tuple[int, ...] = ()
    index: int = -1

    def __post_init__(self):
        if self.kind not in ("text", "id_slot", "test_slot"):
            raise ValidationError(f"unknown segment kind {self.kind!r}")
        if self.kind == "text" and not self.tokens:
            raise ValidationError("text segment must carry tokens")
        if self.kind != "text" and self.index < 0:
            raise ValidationError("image segment must carry a slot index")


@dataclass
class IdRef:
    name_token: int
    feats: np.ndarray


@dataclass
class InterleavedSample:
    task_kind: str
    id_refs: list[IdRef]
    test_feats: list[np.ndarray]
    prompt: list[PromptSegment]
    response: list[int]

    def validate(self) -> "InterleavedSample":
        if self.task_kind not in TASK_KINDS:
            raise ValidationError(f"unknown task kind {self.task_kind!r}")
        if not self.response:
            raise ValidationError("response must be non-empty")
        for seg in self.prompt:
            if seg.kind == "id_slot" and seg.index >= len(self.id_refs):
                raise AssemblyError(
                    f"id slot {seg.index} but only {len(self.id_refs)} reference images"
                )
            if seg.kind == "test_slot" and seg.index >= len(self.test_feats):
                raise AssemblyError(
                    f"test slot {seg.index} but only {len(self.test_feats)} test images"
                )
        return self


def _feats_to_json(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape), "data": [float(x) for x in arr.reshape(-1)]}


def _feats_from_json(obj: dict) -> np.ndarray:
    return np.asarray(obj["data"], dtype=np.float64).reshape(obj["shape"])


def sample_to_json(sample: InterleavedSample) -> str:
    return json.dumps(
        {
            "task_kind": sample.task_kind,
            "id_refs": [
                {"name": r.name_token, "feats": _feats_to_json(r.feats)}
                for r in sample.id_refs
            ],
            "test_feats": [_feats_to_json(f) for f in sample.test_feats],
            "prompt": [
                {"kind": s.kind, "tokens": list(s.tokens)}
                if s.kind == "text"
                else {"kind": s.kind, "index": s.index}
                for s in sample.prompt
            ],
            "response": list(sample.response),
        },
        sort_keys=True,
    )


def sample_from_json(line: str) -> InterleavedSample:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"unparseable sample line: {exc}") from exc
    prompt = []
    for seg in obj["prompt"]:
        if seg["kind"] == "text":
            prompt.append(PromptSegment(kind="text", tokens=tuple(seg["tokens"])))
        else:
            prompt.append(PromptSegment(kind=seg["kind"], index=seg["index"]))
    return InterleavedSample(
        task_kind=obj["task_kind"],
        id_refs=[
            IdRef(name_token=r["name"], feats=_feats_from_json(r["feats"]))
            for r in obj["id_refs"]
        ],
        test_feats=[_feats_from_json(f) for f in obj["test_feats"]],
        prompt=prompt,
        response=list(obj["response"]),
    ).validate()


def save_samples(path, samples) -> None:
    atomic_write_text(path, "".join(sample_to_json(s) + "\n" for s in samples))


def load_samples(path) -> list[InterleavedSample]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(sample_from_json(line))
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
    return out


@dataclass
class SceneSpec:
    """What a generated sample looked like before tokenization (for audits)."""

    placements: list[tuple[int, int, int]] = field(default_factory=list)
    bound_identities: list[int] = field(default_factory=list)
    asked_slot: int = -1
    asked_identity: int = -1


def _binding_preamble(vocab: Vocab, name_ids: list[int]) -> list[PromptSegment]:
    segs = []
    is_id = vocab.id("is")
    dot = vocab.id(".")
    for i, name in enumerate(name_ids):
        segs.append(PromptSegment(kind="text", tokens=(name, is_id)))
        segs.append(PromptSegment(kind="id_slot", index=i))
        segs.append(PromptSegment(kind="text", tokens=(dot,)))
    return segs


def make_synthetic_dataset(
    world: SyntheticWorld,
    vocab: Vocab,
    n_samples: int,
    seed: int,
    stage: str = "shot",
    heldout: bool = False,
    task_mix: dict[str, float] | None = None,
    n_bound: int = 4,
    n_matching_options: int = 2,
    n_poses: int = 8,
    return_specs: bool = False,
):
    """Generate interleaved samples; each sample derives from (seed, index) alone.

    ``n_bound`` reference images are bound per qa/location/caption sample: the
    scene's identities plus distractors, in shuffled order, with per-sample
    names — the answer is recoverable only through reference matching.

    ``n_poses`` caps the pose pool per identity.  Reusing a finite set of
    renders means the same image appears across samples under different name
    bindings, so a model cannot shortcut the task by memorising per-sample
    feature fingerprints: only the binding circuit explains the data.
    """
    if stage not in STAGES:
        raise ConfigError(f"stage must be one of {STAGES}, got {stage!r}")
    if n_poses < 1:
        raise ConfigError("n_poses must be positive")
    mix = dict(DEFAULT_TASK_MIX if task_mix is None else task_mix)
    unknown = set(mix) - set(TASK_KINDS)
    if unknown:
        raise ConfigError(f"unknown task kinds in mix: {sorted(unknown)}")
    kinds = sorted(k for k, w in mix.items() if w > 0)
    weights = np.array([mix[k] for k in kinds], dtype=np.float64)
    if not kinds or weights.sum() <= 0:
        raise ConfigError("task mix selects no tasks")
    weights = weights / weights.sum()
    train_ids, held_ids = world.identity_split()
    pool = held_ids if heldout else train_ids
    if n_bound > len(pool):
        raise ConfigError(
            f"n_bound={n_bound} exceeds the {len(pool)} identities in the split"
        )
    if not 2 <= n_matching_options <= len(OPTION_WORDS):
        raise ConfigError(f"n_matching_options must be 2..{len(OPTION_WORDS)}")
    name_ids_all = vocab.encode(vocab.name_tokens)

    samples, specs = [], []
    for i in range(n_samples):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        kind = kinds[int(rng.choice(len(kinds), p=weights))]
        if kind == "matching":
            sample, spec = _make_matching(
                world, vocab, rng, pool, name_ids_all, stage, n_matching_options, n_poses
            )
        else:
            sample, spec = _make_scene_task(
                world, vocab, rng, pool, name_ids_all, stage, kind, n_bound, n_poses
            )
        samples.append(sample.validate())
        specs.append(spec)
    if return_specs:
        return samples, specs
    return samples


def _make_scene_task(world, vocab, rng, pool, name_ids_all, stage, kind, n_bound, n_poses):
    # qa shows a single-person crop so the question stays slot-free ("who is
    # in the shot?") — identity recognition pure, like the matching options.
    # location and caption get composed multi-occupant scenes.
    if kind == "qa":
        scene_size = 1
    else:
        scene_size = int(rng.integers(2, min(3, len(SLOT_NAMES)) + 1))
    scene_identities = [int(x) for x in rng.choice(pool, size=scene_size, replace=False)]
    slots = sorted(int(s) for s in rng.choice(len(SLOT_NAMES), size=scene_size, replace=False))
    pose_seeds = [int(x) for x in rng.integers(0, n_poses, size=scene_size)]
    placements = list(zip(slots, scene_identities, pose_seeds))
    if kind == "qa":
        scene = world.encode_identity(scene_identities[0], pose_seeds[0])
    else:
        scene = world.compose_scene(placements)

    others = [p for p in pool if p not in scene_identities]
    n_extra = min(n_bound - scene_size, len(others))
    distractors = (
        [int(x) for x in rng.choice(others, size=n_extra, replace=False)]
        if n_extra > 0
        else []
    )
    bound = scene_identities + distractors
    order = rng.permutation(len(bound))
    bound = [bound[j] for j in order]
    names = [int(x) for x in rng.choice(name_ids_all, size=len(bound), replace=False)]

    id_refs = []
    for identity, name in zip(bound, names):
        if stage == "crop" and identity in scene_identities:
            pose = pose_seeds[scene_identities.index(identity)]
        else:
            pose = int(rng.integers(0, n_poses))
        id_refs.append(IdRef(name_token=name, feats=world.encode_identity(identity, pose)))

    ask_pos = int(rng.integers(0, scene_size))
    asked_slot, asked_identity = slots[ask_pos], scene_identities[ask_pos]
    name_of = {ident: name for ident, name in zip(bound, names)}
    slot_tok = [vocab.id(w) for w in SLOT_WORDS]
    q = vocab.id("?")

    prompt = _binding_preamble(vocab, names)
    if kind == "qa":
        prompt.append(
            PromptSegment(kind="text", tokens=(vocab.id("who"), vocab.id("is"), vocab.id("in")))
        )
        prompt.append(PromptSegment(kind="test_slot", index=0))
        prompt.append(PromptSegment(kind="text", tokens=(q,)))
        response = [name_of[asked_identity], vocab.eot_id]
    elif kind == "location":
        prompt.append(
            PromptSegment(
                kind="text",
                tokens=(vocab.id("where"), vocab.id("is"), name_of[asked_identity], vocab.id("in")),
            )
        )
        prompt.append(PromptSegment(kind="test_slot", index=0))
        prompt.append(PromptSegment(kind="text", tokens=(q,)))
        response = [slot_tok[asked_slot], vocab.eot_id]
    elif kind == "caption":
        prompt.append(PromptSegment(kind="text", tokens=(vocab.id("describe"),)))
        prompt.append(PromptSegment(kind="test_slot", index=0))
        response = []
        for slot, identity, _ in placements:  # already in slot order
            response += [slot_tok[slot], name_of[identity]]
        response.append(vocab.eot_id)
    else:  # pragma: no cover - guarded by caller
        raise ConfigError(f"unexpected kind {kind!r}")

    sample = InterleavedSample(
        task_kind=kind,
        id_refs=id_refs,
        test_feats=[scene],
        prompt=prompt,
        response=response,
    )
    spec = SceneSpec(
        placements=placements,
        bound_identities=bound,
        asked_slot=asked_slot,
        asked_identity=asked_identity,
    )
    return sample, spec


def _make_matching(world, vocab, rng, pool, name_ids_all, stage, n_options, n_poses):
    target = int(rng.choice(pool))
    others = [p for p in pool if p != target]
    distractors = [int(x) for x in rng.choice(others, size=n_options - 1, replace=False)]
    query_pose = int(rng.integers(0, n_poses))
    positive_pose = query_pose if stage == "crop" else int(rng.integers(0, n_poses))

    options = [(target, positive_pose)] + [
        (d, int(rng.integers(0, n_poses))) for d in distractors
    ]
    order = rng.permutation(n_options)
    options = [options[j] for j in order]
    answer_pos = int(np.where(order == 0)[0][0])

    name = int(rng.choice(name_ids_all))
    id_refs = [IdRef(name_token=name, feats=world.encode_identity(target, query_pose))]
    test_feats = [world.encode_identity(ident, pose) for ident, pose in options]

    prompt = _binding_preamble(vocab, [name])
    prompt.append(
        PromptSegment(kind="text", tokens=(vocab.id("which"), vocab.id("shows"), name))
    )
    for j in range(n_options):
        prompt.append(PromptSegment(kind="text", tokens=(vocab.id(OPTION_WORDS[j]),)))
        prompt.append(PromptSegment(kind="test_slot", index=j))
    prompt.append(PromptSegment(kind="text", tokens=(vocab.id("?"),)))
    response = [vocab.id(OPTION_WORDS[answer_pos]), vocab.eot_id]

    sample = InterleavedSample(
        task_kind="matching",
        id_refs=id_refs,
        test_feats=test_feats,
        prompt=prompt,
        response=response,
    )
    spec = SceneSpec(
        placements=[],
        bound_identities=[target] + distractors,
        asked_slot=-1,
        asked_identity=target,
    )
    return sample, spec


def chance_level(samples) -> dict[str, float]:
    """Informed guessing rate per task: uniform over the in-prompt candidates."""
    by_task: dict[str, list[float]] = {}
    for s in samples:
        if s.task_kind == "qa":
            c = 1.0 / max(1, len(s.id_refs))
        elif s.task_kind == "location":
            c = 1.0 / len(SLOT_NAMES)
        elif s.task_kind == "matching":
            c = 1.0 / max(1, len(s.test_feats))
        else:  # caption: joint sequence, effectively zero
            c = 0.0
        by_task.setdefault(s.task_kind, []).append(c)
    return {k: float(np.mean(v)) for k, v in sorted(by_task.items())}
