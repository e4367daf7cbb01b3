"""Persistence: checkpoints, bundle directories, embedding files, mask RLE."""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .compressor import AutoencoderPair, make_pair
from .deformation import DecoderHeads, HexPlaneGrid
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
from .state import EngineState, TrainConfig

CHECKPOINT_MAGIC = b"4DLF"
CHECKPOINT_VERSION = 1
EMBED_MAGIC = b"4DEM"
EMBED_DTYPE_F32 = 1


# ----------------------------------------------------------------- embeddings


def write_embeddings(path: str | Path, rows: np.ndarray) -> None:
    """Header {magic, u32 count, u32 dim, u8 dtype}, then row-major f32 LE."""
    rows = np.ascontiguousarray(rows, dtype="<f4")
    if rows.ndim != 2:
        raise ValueError("embedding array must be 2D")
    with open(path, "wb") as fh:
        fh.write(EMBED_MAGIC)
        fh.write(struct.pack("<IIB", rows.shape[0], rows.shape[1], EMBED_DTYPE_F32))
        fh.write(rows.tobytes())


def read_embeddings(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != EMBED_MAGIC:
            raise ValueError(f"bad embedding file magic {magic!r}")
        count, dim, dtype = struct.unpack("<IIB", fh.read(9))
        if dtype != EMBED_DTYPE_F32:
            raise ValueError(f"unknown embedding dtype code {dtype}")
        data = fh.read(count * dim * 4)
        if len(data) != count * dim * 4:
            raise ValueError("truncated embedding file")
        return np.frombuffer(data, dtype="<f4").reshape(count, dim).copy()


# ----------------------------------------------------------------- checkpoint


def _collect_arrays(state: EngineState) -> tuple[dict, dict[str, np.ndarray]]:
    arrays: dict[str, np.ndarray] = {}
    cloud = state.cloud
    arrays["cloud.positions"] = cloud.positions.detach().numpy()
    arrays["cloud.rotations"] = cloud.rotations.detach().numpy()
    arrays["cloud.log_scales"] = cloud.log_scales.detach().numpy()
    arrays["cloud.opacity_logits"] = cloud.opacity_logits.detach().numpy()
    arrays["cloud.colors"] = cloud.colors.detach().numpy()
    arrays["cloud.state_prototypes"] = cloud.state_prototypes.detach().numpy()
    for lvl in SEMANTIC_LEVELS:
        arrays[f"cloud.semantics.{lvl}"] = cloud.static_semantics[lvl].detach().numpy()
    for name, p in state.grid.named_parameters():
        arrays[f"grid.{name}"] = p.detach().numpy()
    for name, p in state.heads.named_parameters():
        arrays[f"heads.{name}"] = p.detach().numpy()
    meta = {
        "config": {
            "stage_iterations": list(state.config.stage_iterations),
            "iteration_scale": state.config.iteration_scale,
            "lr_deform": state.config.lr_deform,
            "lr_prototypes": state.config.lr_prototypes,
            "lr_semantics": state.config.lr_semantics,
            "grid_lr_multiplier": state.config.grid_lr_multiplier,
            "num_states": state.config.num_states,
            "seed": state.config.seed,
            "grid_resolutions": list(state.config.grid_resolutions),
            "grid_feature_width": state.config.grid_feature_width,
            "grid_init_scale": state.config.grid_init_scale,
            "head_hidden": state.config.head_hidden,
        },
        "aabb_min": state.aabb_min.tolist(),
        "aabb_max": state.aabb_max.tolist(),
        "ae": {},
    }
    for tag, pair in (("static", state.static_ae), ("caption", state.caption_ae)):
        if pair is None:
            continue
        widths = pair.encoder.widths
        meta["ae"][tag] = {"widths": widths}
        for name, p in pair.encoder.named_parameters():
            arrays[f"ae.{tag}.encoder.{name}"] = p.detach().numpy()
        for name, p in pair.decoder.named_parameters():
            arrays[f"ae.{tag}.decoder.{name}"] = p.detach().numpy()
    return meta, arrays


def save_checkpoint(state: EngineState, path: str | Path) -> None:
    meta, arrays = _collect_arrays(state)
    index = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        blob = arr.tobytes()
        index.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta, "arrays": index}, sort_keys=True).encode()
    payload = struct.pack("<Q", len(header)) + header + b"".join(blobs)
    checksum = hashlib.sha256(payload).digest()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(checksum)
        fh.write(payload)


def load_checkpoint(path: str | Path) -> EngineState:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {raw[:4]!r}")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    checksum = raw[8:40]
    payload = raw[40:]
    if hashlib.sha256(payload).digest() != checksum:
        raise ValueError("checkpoint checksum mismatch (file corrupt or truncated)")
    (header_len,) = struct.unpack("<Q", payload[:8])
    header = json.loads(payload[8 : 8 + header_len])
    body = payload[8 + header_len :]
    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        blob = body[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(blob, dtype="<f4").reshape(entry["shape"]).copy()

    meta = header["meta"]
    cfg_meta = meta["config"]
    config = TrainConfig(
        stage_iterations=tuple(cfg_meta["stage_iterations"]),
        iteration_scale=cfg_meta["iteration_scale"],
        lr_deform=cfg_meta["lr_deform"],
        lr_prototypes=cfg_meta["lr_prototypes"],
        lr_semantics=cfg_meta["lr_semantics"],
        grid_lr_multiplier=cfg_meta["grid_lr_multiplier"],
        num_states=cfg_meta["num_states"],
        seed=cfg_meta["seed"],
        grid_resolutions=tuple(cfg_meta["grid_resolutions"]),
        grid_feature_width=cfg_meta["grid_feature_width"],
        grid_init_scale=cfg_meta["grid_init_scale"],
        head_hidden=cfg_meta["head_hidden"],
    )

    cloud = GaussianCloud(
        positions=torch.from_numpy(arrays["cloud.positions"]),
        rotations=torch.from_numpy(arrays["cloud.rotations"]),
        log_scales=torch.from_numpy(arrays["cloud.log_scales"]),
        opacity_logits=torch.from_numpy(arrays["cloud.opacity_logits"]),
        colors=torch.from_numpy(arrays["cloud.colors"]),
        static_semantics={
            lvl: torch.from_numpy(arrays[f"cloud.semantics.{lvl}"]) for lvl in SEMANTIC_LEVELS
        },
        state_prototypes=torch.from_numpy(arrays["cloud.state_prototypes"]),
    )

    aabb_min = np.asarray(meta["aabb_min"], dtype=np.float32)
    aabb_max = np.asarray(meta["aabb_max"], dtype=np.float32)
    grid = HexPlaneGrid(
        aabb_min,
        aabb_max,
        resolutions=config.grid_resolutions,
        feature_width=config.grid_feature_width,
    )
    with torch.no_grad():
        for name, p in grid.named_parameters():
            p.copy_(torch.from_numpy(arrays[f"grid.{name}"]))
    heads = DecoderHeads(grid.fused_width, config.num_states, hidden=config.head_hidden)
    with torch.no_grad():
        for name, p in heads.named_parameters():
            p.copy_(torch.from_numpy(arrays[f"heads.{name}"]))

    pairs: dict[str, AutoencoderPair | None] = {"static": None, "caption": None}
    for tag in pairs:
        if tag not in meta["ae"]:
            continue
        pair = make_pair(meta["ae"][tag]["widths"])
        with torch.no_grad():
            for name, p in pair.encoder.named_parameters():
                p.copy_(torch.from_numpy(arrays[f"ae.{tag}.encoder.{name}"]))
            for name, p in pair.decoder.named_parameters():
                p.copy_(torch.from_numpy(arrays[f"ae.{tag}.decoder.{name}"]))
        pairs[tag] = pair

    return EngineState(
        cloud=cloud,
        grid=grid,
        heads=heads,
        static_ae=pairs["static"],
        caption_ae=pairs["caption"],
        config=config,
        aabb_min=aabb_min,
        aabb_max=aabb_max,
    )


def save_autoencoders(
    path: str | Path, static_ae: AutoencoderPair, caption_ae: AutoencoderPair
) -> None:
    """Standalone autoencoder store (npz) for the compress CLI step."""
    arrays = {}
    for tag, pair in (("static", static_ae), ("caption", caption_ae)):
        arrays[f"{tag}.widths"] = np.asarray(pair.encoder.widths)
        for name, p in pair.encoder.named_parameters():
            arrays[f"{tag}.encoder.{name}"] = p.detach().numpy()
        for name, p in pair.decoder.named_parameters():
            arrays[f"{tag}.decoder.{name}"] = p.detach().numpy()
    np.savez(path, **arrays)


def load_autoencoders(path: str | Path) -> tuple[AutoencoderPair, AutoencoderPair]:
    data = np.load(path)
    pairs = []
    for tag in ("static", "caption"):
        pair = make_pair([int(w) for w in data[f"{tag}.widths"]])
        with torch.no_grad():
            for name, p in pair.encoder.named_parameters():
                p.copy_(torch.from_numpy(data[f"{tag}.encoder.{name}"]))
            for name, p in pair.decoder.named_parameters():
                p.copy_(torch.from_numpy(data[f"{tag}.decoder.{name}"]))
        pairs.append(pair)
    return pairs[0], pairs[1]


# ----------------------------------------------------------------- mask RLE


def rle_encode(mask: np.ndarray) -> dict:
    """Row-major run-length encoding; counts alternate starting with zeros."""
    flat = np.asarray(mask, dtype=bool).ravel()
    counts = []
    current, run = False, 0
    for bit in flat:
        if bit == current:
            run += 1
        else:
            counts.append(run)
            current, run = bit, 1
    counts.append(run)
    return {"size": list(mask.shape), "counts": counts}


def rle_decode(rle: dict) -> np.ndarray:
    total = int(np.prod(rle["size"]))
    flat = np.zeros(total, dtype=bool)
    pos, value = 0, False
    for count in rle["counts"]:
        if value:
            flat[pos : pos + count] = True
        pos += count
        value = not value
    if pos != total:
        raise ValueError(f"RLE counts cover {pos} pixels, mask has {total}")
    return flat.reshape(rle["size"])


# ----------------------------------------------------------- bundle directory


def _camera_to_json(cam: CameraModel) -> dict:
    return {
        "fx": cam.fx,
        "fy": cam.fy,
        "cx": cam.cx,
        "cy": cam.cy,
        "world_to_camera": np.asarray(cam.world_to_camera, dtype=float).reshape(-1).tolist(),
        "width": cam.width,
        "height": cam.height,
        "t": cam.t,
    }


def _camera_from_json(data: dict) -> CameraModel:
    return CameraModel(
        fx=data["fx"],
        fy=data["fy"],
        cx=data["cx"],
        cy=data["cy"],
        world_to_camera=np.asarray(data["world_to_camera"], dtype=np.float64).reshape(4, 4),
        width=data["width"],
        height=data["height"],
        t=data["t"],
    )


def save_bundle(bundle: SceneBundle, directory: str | Path) -> None:
    directory = Path(directory)
    frames_dir = directory / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(bundle.frames):
        Image.fromarray(frame).save(frames_dir / f"{i:05d}.png")
    (directory / "cameras.json").write_text(
        json.dumps([_camera_to_json(c) for c in bundle.cameras], indent=1)
    )
    for track in bundle.mask_tracks:
        mask_dir = directory / "masks" / str(track.object_id)
        mask_dir.mkdir(parents=True, exist_ok=True)
        for f, mask in track.masks.items():
            Image.fromarray(mask.astype(np.uint8) * 255).save(mask_dir / f"{f:05d}.png")

    static_keys = sorted(bundle.static_embeddings)
    if static_keys:
        rows = np.stack([bundle.static_embeddings[k] for k in static_keys])
        write_embeddings(directory / "static_embeddings.bin", rows)
        (directory / "static_index.json").write_text(
            json.dumps([[level, oid, f] for level, oid, f in static_keys])
        )
    if bundle.caption_records:
        rows = np.stack([r.embedding for r in bundle.caption_records])
        write_embeddings(directory / "caption_embeddings.bin", rows)
        (directory / "captions.json").write_text(
            json.dumps(
                [
                    {
                        "object_id": r.object_id,
                        "frame_index": r.frame_index,
                        "video_description": r.video_description,
                        "caption": r.caption,
                    }
                    for r in bundle.caption_records
                ],
                indent=1,
            )
        )
    if bundle.ground_truth is not None:
        (directory / "ground_truth.json").write_text(
            json.dumps(
                {
                    "queries": [
                        {
                            "text": q.text,
                            "mode": q.mode,
                            "object_id": q.object_id,
                            "state": q.state,
                            "active_frames": sorted(q.active_frames),
                        }
                        for q in bundle.ground_truth.queries
                    ],
                    "state_timeline": {
                        str(k): v for k, v in bundle.ground_truth.state_timeline.items()
                    },
                }
            )
        )


def load_bundle(directory: str | Path) -> SceneBundle:
    directory = Path(directory)
    frame_paths = sorted((directory / "frames").glob("*.png"))
    frames = [np.asarray(Image.open(p).convert("RGB")) for p in frame_paths]
    cameras = [
        _camera_from_json(c) for c in json.loads((directory / "cameras.json").read_text())
    ]

    mask_tracks = []
    masks_root = directory / "masks"
    if masks_root.exists():
        for obj_dir in sorted(masks_root.iterdir(), key=lambda p: int(p.name)):
            masks = {}
            for p in sorted(obj_dir.glob("*.png")):
                masks[int(p.stem)] = np.asarray(Image.open(p).convert("L")) >= 128
            mask_tracks.append(
                MaskTrack(object_id=int(obj_dir.name), masks=masks, frame_count=len(frames))
            )

    static_embeddings = {}
    if (directory / "static_embeddings.bin").exists():
        rows = read_embeddings(directory / "static_embeddings.bin")
        index = json.loads((directory / "static_index.json").read_text())
        for row, (level, oid, f) in zip(rows, index):
            static_embeddings[(level, int(oid), int(f))] = row.astype(np.float32)

    caption_records = []
    if (directory / "caption_embeddings.bin").exists():
        rows = read_embeddings(directory / "caption_embeddings.bin")
        meta = json.loads((directory / "captions.json").read_text())
        for row, rec in zip(rows, meta):
            caption_records.append(
                CaptionRecord(
                    object_id=rec["object_id"],
                    frame_index=rec["frame_index"],
                    video_description=rec["video_description"],
                    caption=rec["caption"],
                    embedding=row.astype(np.float32),
                )
            )

    ground_truth = None
    if (directory / "ground_truth.json").exists():
        data = json.loads((directory / "ground_truth.json").read_text())
        ground_truth = GroundTruth(
            queries=[
                GroundTruthQuery(
                    text=q["text"],
                    mode=q["mode"],
                    object_id=q["object_id"],
                    state=q["state"],
                    active_frames=set(q["active_frames"]),
                )
                for q in data["queries"]
            ],
            state_timeline={int(k): v for k, v in data.get("state_timeline", {}).items()},
        )

    return SceneBundle(
        frames=frames,
        cameras=cameras,
        mask_tracks=mask_tracks,
        static_embeddings=static_embeddings,
        caption_records=caption_records,
        ground_truth=ground_truth,
    )
