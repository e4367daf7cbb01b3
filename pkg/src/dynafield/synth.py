"""Synthetic dynamic-scene generator.

Stands in for real captured datasets at desk scale: objects are clusters of
Gaussians moving along piecewise-linear paths in front of a static camera, with at
least one object switching semantic state at a configured time. Frames are
rendered from the ground-truth Gaussians, masks are exact, and embeddings
are cluster-structured (one cluster per object/state), so every downstream
stage has an oracle to be checked against.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import renderer
from .fixtures import DeterministicEmbedder, StaticTextEmbedder, make_caption_embedder
from .scene import (
    SEMANTIC_LEVELS,
    CameraModel,
    CaptionRecord,
    GaussianCloud,
    GroundTruth,
    GroundTruthQuery,
    MaskTrack,
    SceneBundle,
)

MASK_ALPHA_THRESHOLD = 0.5


@dataclass
class ObjectSpec:
    name: str
    color: tuple[float, float, float]
    start: tuple[float, float, float]
    end: tuple[float, float, float]
    state_captions: list[str]
    switch_time: float | None = None  # t at which state 0 -> 1; None = static state
    radius: float = 0.3
    num_gaussians: int = 60
    # "linear": start -> end over [0, 1]; "outAndBack": reach end at t=0.5,
    # return to start by t=1 (keeps geometry symmetric about the midpoint so
    # temporal position is not linearly decodable from pixel drift alone)
    path: str = "linear"


@dataclass
class SynthSpec:
    objects: list[ObjectSpec]
    num_frames: int = 8
    width: int = 128
    height: int = 128
    seed: int = 0
    num_states: int = 3
    focal: float = 200.0
    object_depth: float = 4.0
    backdrop_gaussians: int = 48
    embed_noise: float = 0.02
    # the backdrop is supervised like an object so unclaimed pixels carry a
    # well-defined (non-matching) semantic cluster instead of free features
    # named so it never collides with words used in object state captions
    background_name: str = "backdrop"
    background_state_caption: str = "staying still"


def path_progress(path: str, t: float) -> float:
    """Fraction of the start->end leg covered at time t."""
    if path == "linear":
        return t
    if path == "outAndBack":
        return 1.0 - abs(2.0 * t - 1.0)
    raise ValueError(f"unknown path kind '{path}'")


@dataclass
class PathDeformation:
    """Ground-truth rigid per-object translation along piecewise-linear paths."""

    offsets: list[tuple[slice, np.ndarray, np.ndarray, str]]  # (range, start, end, path)

    def deform_geometry(self, cloud: GaussianCloud, t: float):
        positions = cloud.positions.clone()
        for idx, start, end, path in self.offsets:
            delta = torch.as_tensor(
                (end - start) * path_progress(path, t), dtype=positions.dtype
            )
            positions[idx] = positions[idx] + delta
        return positions, cloud.rotations, cloud.log_scales

    def time_varying_features(self, cloud: GaussianCloud, t: float) -> torch.Tensor:
        return cloud.state_prototypes.mean(dim=1)

    def object_center(self, obj: ObjectSpec, t: float) -> np.ndarray:
        start = np.asarray(obj.start, dtype=np.float64)
        end = np.asarray(obj.end, dtype=np.float64)
        return start + (end - start) * path_progress(obj.path, t)


@dataclass
class SynthResult:
    """Bundle plus the ground-truth assets the tests and trainer need."""

    bundle: SceneBundle
    spec: SynthSpec
    gt_cloud: GaussianCloud
    deformation: PathDeformation
    init_positions: np.ndarray  # jittered GT positions for trainer init
    init_colors: np.ndarray
    object_slices: dict[int, slice]
    caption_texts: dict[tuple[int, int], str]  # (object_id, frame) -> caption
    video_descriptions: dict[int, str]
    state_of: dict[tuple[int, int], int]  # (object_id, frame) -> state index
    aabb_min: np.ndarray
    aabb_max: np.ndarray


def object_state_at(obj: ObjectSpec, t: float) -> int:
    if obj.switch_time is not None and t >= obj.switch_time:
        return 1
    return 0


def frame_times(num_frames: int) -> list[float]:
    return [i / (num_frames - 1) for i in range(num_frames)]


def default_two_object_spec(
    width: int = 128, height: int = 128, num_frames: int = 8, seed: int = 0
) -> SynthSpec:
    """The standard two-object scene with a state switch at t = 0.5."""
    return SynthSpec(
        objects=[
            ObjectSpec(
                name="cup",
                color=(0.85, 0.25, 0.2),
                start=(-0.55, -0.1, 0.0),
                end=(-0.35, 0.1, 0.0),
                state_captions=["resting upright on the desk", "tilted and pouring liquid"],
                switch_time=0.5,
                path="outAndBack",
            ),
            ObjectSpec(
                name="ball",
                color=(0.2, 0.4, 0.9),
                start=(0.45, 0.15, 0.0),
                end=(0.3, -0.05, 0.0),
                state_captions=["rolling slowly in place"],
            ),
        ],
        num_frames=num_frames,
        width=width,
        height=height,
        seed=seed,
    )


def caption_text(obj: ObjectSpec, state: int) -> str:
    return f"The {obj.name} is {obj.state_captions[state]}."


def video_description_text(obj: ObjectSpec) -> str:
    if len(obj.state_captions) > 1:
        return (
            f"The {obj.name} starts {obj.state_captions[0]} and later is "
            f"{obj.state_captions[1]}."
        )
    return f"The {obj.name} stays {obj.state_captions[0]} throughout."


def labeled_objects(spec: SynthSpec) -> list[tuple[int, ObjectSpec]]:
    """(object_id, spec) pairs for every supervised track, backdrop included."""
    pairs = [(i + 1, obj) for i, obj in enumerate(spec.objects)]
    pairs.append(
        (
            len(spec.objects) + 1,
            ObjectSpec(
                name=spec.background_name,
                color=(0.0, 0.0, 0.0),
                start=(0.0, 0.0, 0.0),
                end=(0.0, 0.0, 0.0),
                state_captions=[spec.background_state_caption],
                num_gaussians=0,
            ),
        )
    )
    return pairs


def save_synth_extras(result: "SynthResult", directory) -> None:
    """Persist trainer init data and fixture phrases next to a saved bundle."""
    import json
    from pathlib import Path

    directory = Path(directory)
    np.savez(
        directory / "synth_init.npz",
        init_positions=result.init_positions,
        init_colors=result.init_colors,
        aabb_min=result.aabb_min,
        aabb_max=result.aabb_max,
    )
    (directory / "synth_objects.json").write_text(
        json.dumps(
            [
                {"name": obj.name, "state_captions": obj.state_captions}
                for _, obj in labeled_objects(result.spec)
            ]
        )
    )


def load_synth_extras(directory):
    """(init_positions, init_colors, aabb_min, aabb_max, objects meta)."""
    import json
    from pathlib import Path

    directory = Path(directory)
    data = np.load(directory / "synth_init.npz")
    objects = json.loads((directory / "synth_objects.json").read_text())
    return (
        data["init_positions"],
        data["init_colors"],
        data["aabb_min"],
        data["aabb_max"],
        objects,
    )


def embedders_from_objects_meta(objects: list[dict]):
    """Rebuild the fixture text embedders from saved object metadata."""
    static = StaticTextEmbedder([o["name"] for o in objects])
    phrases = []
    for o in objects:
        obj = ObjectSpec(
            name=o["name"],
            color=(0, 0, 0),
            start=(0, 0, 0),
            end=(0, 0, 0),
            state_captions=o["state_captions"],
        )
        phrases.extend(caption_text(obj, s) for s in range(len(o["state_captions"])))
    return static, make_caption_embedder(phrases)


def make_text_embedders(result: "SynthResult"):
    """Text embedders whose cluster phrases match the synthetic scene."""
    pairs = labeled_objects(result.spec)
    static = StaticTextEmbedder([obj.name for _, obj in pairs])
    phrases = [
        caption_text(obj, s) for _, obj in pairs for s in range(len(obj.state_captions))
    ]
    return static, make_caption_embedder(phrases)


def make_caption_fixture(result: "SynthResult"):
    """DeterministicCaptioner lookup tables built from the ground truth."""
    from .captions import build_visual_prompt
    from .fixtures import DeterministicCaptioner

    video_texts: dict[str, str] = {}
    frame_texts: dict[str, str] = {}
    bundle = result.bundle
    for track in bundle.mask_tracks:
        frames = sorted(f for f, m in track.masks.items() if m.any())
        prompts = [build_visual_prompt(bundle.frames[f], track.masks[f]) for f in frames]
        from .fixtures import image_content_key

        video_texts[image_content_key(prompts)] = result.video_descriptions[track.object_id]
        for f, prompt in zip(frames, prompts):
            frame_texts[image_content_key([prompt])] = result.caption_texts[
                (track.object_id, f)
            ]
    return DeterministicCaptioner(video_texts, frame_texts)


def synthesize_scene(spec: SynthSpec) -> SynthResult:
    """Build a deterministic synthetic bundle from a `SynthSpec`.

    Deterministic under a fixed seed; rejects degenerate inputs.
    """
    if spec.num_frames < 2:
        raise ValueError("synthetic scenes need at least 2 frames")
    if not spec.objects:
        raise ValueError("synthetic scenes need at least one object")

    rng = np.random.default_rng(spec.seed)
    times = frame_times(spec.num_frames)

    positions, colors, log_scales, opacity_logits = [], [], [], []
    offsets = []
    object_slices: dict[int, slice] = {}
    cursor = 0
    for obj_idx, obj in enumerate(spec.objects):
        n = obj.num_gaussians
        local = rng.normal(0.0, obj.radius / 2.2, size=(n, 3))
        local = np.clip(local, -obj.radius, obj.radius)
        center = np.asarray(obj.start) + np.array([0.0, 0.0, spec.object_depth])
        positions.append(center + local)
        shade = rng.uniform(0.85, 1.0, size=(n, 1))
        colors.append(np.asarray(obj.color) * shade)
        log_scales.append(np.full((n, 3), np.log(0.07)))
        opacity_logits.append(np.full((n,), 2.5))
        sl = slice(cursor, cursor + n)
        object_slices[obj_idx + 1] = sl
        start3 = np.asarray(obj.start, dtype=np.float64)
        end3 = np.asarray(obj.end, dtype=np.float64)
        offsets.append((sl, start3, end3, obj.path))
        cursor += n

    # Static gray backdrop behind the objects for RGB contrast.
    nb = spec.backdrop_gaussians
    if nb > 0:
        grid = int(np.ceil(np.sqrt(nb)))
        gx, gy = np.meshgrid(np.linspace(-1.4, 1.4, grid), np.linspace(-1.4, 1.4, grid))
        back = np.stack([gx.ravel()[:nb], gy.ravel()[:nb], np.full(nb, spec.object_depth + 1.6)], 1)
        positions.append(back)
        colors.append(np.tile(rng.uniform(0.35, 0.5, size=(nb, 1)), (1, 3)))
        log_scales.append(np.full((nb, 3), np.log(0.22)))
        opacity_logits.append(np.full((nb,), 2.5))
        cursor += nb

    positions = np.concatenate(positions).astype(np.float32)
    colors = np.concatenate(colors).astype(np.float32)
    log_scales = np.concatenate(log_scales).astype(np.float32)
    opacity_logits = np.concatenate(opacity_logits).astype(np.float32)
    n_total = positions.shape[0]

    rotations = np.zeros((n_total, 4), dtype=np.float32)
    rotations[:, 0] = 1.0

    cloud = GaussianCloud(
        positions=torch.from_numpy(positions),
        rotations=torch.from_numpy(rotations),
        log_scales=torch.from_numpy(log_scales),
        opacity_logits=torch.from_numpy(opacity_logits),
        colors=torch.from_numpy(colors),
        static_semantics={lvl: torch.zeros((n_total, 3)) for lvl in SEMANTIC_LEVELS},
        state_prototypes=torch.zeros((n_total, spec.num_states, 6)),
    )
    deformation = PathDeformation(offsets=offsets)

    cameras = [
        CameraModel(
            fx=spec.focal,
            fy=spec.focal,
            cx=spec.width / 2.0,
            cy=spec.height / 2.0,
            world_to_camera=np.eye(4),
            width=spec.width,
            height=spec.height,
            t=t,
        )
        for t in times
    ]

    frames: list[np.ndarray] = []
    per_object_alpha: list[dict[int, np.ndarray]] = []
    with torch.no_grad():
        for cam in cameras:
            image = renderer.render(cloud, deformation, cam, "color")
            frame = np.clip(image.values.numpy(), 0.0, 1.0)
            frames.append(np.round(frame * 255.0).astype(np.uint8))
            alphas: dict[int, np.ndarray] = {}
            means, rots, scales = deformation.deform_geometry(cloud, cam.t)
            for object_id, sl in object_slices.items():
                img = renderer.render_arrays(
                    means[sl],
                    rots[sl],
                    scales[sl],
                    cloud.opacity_logits[sl],
                    cloud.colors[sl],
                    cam,
                )
                alphas[object_id] = img.alpha.numpy()
            per_object_alpha.append(alphas)

    # Exact disjoint masks: a pixel belongs to the object with the highest
    # accumulated alpha, provided it clears the threshold.
    mask_tracks = []
    for object_id in object_slices:
        masks: dict[int, np.ndarray] = {}
        for f_idx in range(spec.num_frames):
            alphas = per_object_alpha[f_idx]
            own = alphas[object_id]
            winner = own > MASK_ALPHA_THRESHOLD
            for other_id, other in alphas.items():
                if other_id != object_id:
                    winner &= (own > other) | (
                        (own == other) & (object_id < other_id)
                    )
            masks[f_idx] = winner
        mask_tracks.append(
            MaskTrack(object_id=object_id, masks=masks, frame_count=spec.num_frames)
        )

    # Supervised backdrop track covering every pixel no object claimed.
    labeled = labeled_objects(spec)
    backdrop_id = labeled[-1][0]
    backdrop_masks = {}
    for f_idx in range(spec.num_frames):
        claimed = np.zeros((spec.height, spec.width), dtype=bool)
        for track in mask_tracks:
            claimed |= track.masks[f_idx]
        backdrop_masks[f_idx] = ~claimed
    mask_tracks.append(
        MaskTrack(object_id=backdrop_id, masks=backdrop_masks, frame_count=spec.num_frames)
    )

    # Cluster-structured embeddings.
    static_embedder = StaticTextEmbedder([obj.name for _, obj in labeled])
    static_embeddings: dict[tuple[str, int, int], np.ndarray] = {}
    for object_id, obj in labeled:
        center = static_embedder.center(obj.name)
        for level in SEMANTIC_LEVELS:
            for f_idx in range(spec.num_frames):
                noise = rng.standard_normal(center.shape[0]).astype(np.float32)
                vec = center + spec.embed_noise * noise
                static_embeddings[(level, object_id, f_idx)] = (
                    vec / np.linalg.norm(vec)
                ).astype(np.float32)

    all_state_phrases = [
        caption_text(obj, s) for _, obj in labeled for s in range(len(obj.state_captions))
    ]
    caption_embedder = make_caption_embedder(all_state_phrases)

    caption_texts: dict[tuple[int, int], str] = {}
    video_descriptions: dict[int, str] = {}
    state_of: dict[tuple[int, int], int] = {}
    caption_records = []
    for object_id, obj in labeled:
        video_descriptions[object_id] = video_description_text(obj)
        for f_idx, t in enumerate(times):
            state = object_state_at(obj, t)
            state_of[(object_id, f_idx)] = state
            text = caption_text(obj, state)
            caption_texts[(object_id, f_idx)] = text
            caption_records.append(
                CaptionRecord(
                    object_id=object_id,
                    frame_index=f_idx,
                    video_description=video_descriptions[object_id],
                    caption=text,
                    embedding=caption_embedder.embed(f"{text} [frame {f_idx}]"),
                )
            )

    queries = []
    for obj_idx, obj in enumerate(spec.objects):
        object_id = obj_idx + 1
        queries.append(
            GroundTruthQuery(
                text=obj.name,
                mode="timeAgnostic",
                object_id=object_id,
                state=-1,
                active_frames=set(range(spec.num_frames)),
            )
        )
        for state in range(len(obj.state_captions)):
            active = {
                f_idx for f_idx, t in enumerate(times) if object_state_at(obj, t) == state
            }
            queries.append(
                GroundTruthQuery(
                    text=caption_text(obj, state),
                    mode="timeSensitive",
                    object_id=object_id,
                    state=state,
                    active_frames=active,
                )
            )
    ground_truth = GroundTruth(
        queries=queries,
        state_timeline={
            obj_idx + 1: [object_state_at(obj, t) for t in times]
            for obj_idx, obj in enumerate(spec.objects)
        },
    )

    bundle = SceneBundle(
        frames=frames,
        cameras=cameras,
        mask_tracks=mask_tracks,
        static_embeddings=static_embeddings,
        caption_records=caption_records,
        ground_truth=ground_truth,
    )

    init_positions = (positions + rng.normal(0.0, 0.01, positions.shape)).astype(np.float32)
    init_colors = np.clip(
        colors + rng.normal(0.0, 0.05, colors.shape), 0.0, 1.0
    ).astype(np.float32)

    lo = positions.min(axis=0) - 0.5
    hi = positions.max(axis=0) + 0.5
    return SynthResult(
        bundle=bundle,
        spec=spec,
        gt_cloud=cloud,
        deformation=deformation,
        init_positions=init_positions,
        init_colors=init_colors,
        object_slices=object_slices,
        caption_texts=caption_texts,
        video_descriptions=video_descriptions,
        state_of=state_of,
        aabb_min=lo.astype(np.float32),
        aabb_max=hi.astype(np.float32),
    )
