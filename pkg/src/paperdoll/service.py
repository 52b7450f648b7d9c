"""HTTP facade for the interactive studio.

Endpoints:
  POST /api/parsing  pose + shape text -> parsing PNG + attributes + session id
  POST /api/image    session (or parsing override) + texture text -> image PNG
  GET  /api/poses    bundled pose ids with thumbnails

Checkpoints load once and are shared read-only across requests; per-session
state is only mutated by that session's requests. Responses are deterministic
for explicit seeds.
"""

from __future__ import annotations

import hashlib
import threading
import uuid
from typing import Optional

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel

from . import corpus, pipeline, textattr
from .corpus import N_CLASSES, AttributeSet

BUNDLED_POSE_SEEDS = list(range(101, 109))

POSE_THUMB_COLORS = np.array(
    [
        [240, 240, 245],  # background
        [250, 220, 130],  # head
        [200, 80, 80],  # torso
        [90, 140, 220],  # left arm
        [120, 180, 240],  # right arm
        [90, 170, 90],  # left leg
        [140, 210, 140],  # right leg
    ],
    dtype=np.uint8,
)


class ParsingRequest(BaseModel):
    pose_id: Optional[str] = None
    pose_png_base64: Optional[str] = None
    shape_text: str
    seed: int = 0


class ImageRequest(BaseModel):
    session_id: Optional[str] = None
    parsing_png_base64: Optional[str] = None
    texture_text: str
    seed: int = 0


def bundled_poses():
    out = {}
    for i, seed in enumerate(BUNDLED_POSE_SEEDS):
        out[f"pose-{i:03d}"] = corpus.gen_sample(seed).pose
    return out


def create_app(checkpoint_dir, cfg=None):
    cfg = cfg or pipeline.PipelineConfig()
    app = FastAPI(title="paperdoll studio service")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )
    state = {"bundle": None, "lock": threading.Lock(), "sessions": {},
             "lexicon": textattr.Lexicon.default(), "poses": bundled_poses()}

    def get_bundle():
        with state["lock"]:
            if state["bundle"] is None:
                try:
                    state["bundle"] = pipeline.ModelBundle.load(checkpoint_dir)
                except FileNotFoundError as exc:
                    raise HTTPException(status_code=409, detail=str(exc))
            return state["bundle"]

    @app.get("/api/poses")
    def list_poses():
        items = []
        for pid in sorted(state["poses"]):
            pose = state["poses"][pid]
            thumb = pipeline.image_to_png_b64(POSE_THUMB_COLORS[pose] / 255.0)
            items.append({
                "id": pid,
                "pose_png_base64": pipeline.label_grid_to_png_b64(pose),
                "thumbnail_png_base64": thumb,
            })
        return {"poses": items}

    @app.post("/api/parsing")
    def make_parsing(req: ParsingRequest):
        bundle = get_bundle()
        if req.pose_png_base64:
            pose = pipeline.png_b64_to_label_grid(req.pose_png_base64)
        elif req.pose_id:
            if req.pose_id not in state["poses"]:
                raise HTTPException(status_code=404, detail=f"unknown pose id {req.pose_id}")
            pose = state["poses"][req.pose_id]
        else:
            raise HTTPException(status_code=400, detail="pose_id or pose_png_base64 required")
        if pose.shape != (cfg.height, cfg.width) or pose.max() >= corpus.N_PARTS:
            raise HTTPException(status_code=400, detail="invalid pose grid")
        try:
            shape = textattr.shape_attrs_from_text(req.shape_text, state["lexicon"])
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        attrs = AttributeSet(**shape, upper_texture=1, lower_texture=1)
        from .parsing import predict_parsing

        parsing_map = predict_parsing(bundle.stage1, pose, attrs)
        session_id = str(uuid.uuid4())
        with state["lock"]:
            state["sessions"][session_id] = {
                "pose": pose.copy(),
                "parsing": parsing_map.copy(),
                "shape": shape,
                "seeds": [req.seed],
            }
        return {
            "session_id": session_id,
            "parsing_png_base64": pipeline.label_grid_to_png_b64(parsing_map),
            "attributes": shape,
        }

    @app.post("/api/image")
    def make_image(req: ImageRequest):
        bundle = get_bundle()
        session = None
        if req.session_id is not None:
            with state["lock"]:
                session = state["sessions"].get(req.session_id)
            if session is None:
                raise HTTPException(status_code=404, detail=f"unknown session {req.session_id}")
        if req.parsing_png_base64:
            parsing_map = pipeline.png_b64_to_label_grid(req.parsing_png_base64)
            overridden = True
        elif session is not None:
            parsing_map = session["parsing"]
            overridden = False
        else:
            raise HTTPException(status_code=400,
                                detail="session_id or parsing_png_base64 required")
        if parsing_map.shape != (cfg.height, cfg.width):
            raise HTTPException(status_code=400, detail="parsing grid has wrong shape")
        if parsing_map.max() >= N_CLASSES:
            raise HTTPException(status_code=400,
                                detail=f"invalid parsing label {int(parsing_map.max())}")
        try:
            tex = textattr.texture_attrs_from_text(req.texture_text, state["lexicon"])
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        shape = session["shape"] if session else {"sleeve_length": 0, "lower_length": 0,
                                                  "neckline": 0}
        attrs = AttributeSet(**shape, **tex)
        image, top_tokens, fine = pipeline._stage2(bundle, parsing_map, attrs, req.seed, cfg)
        pose = session["pose"] if session else np.zeros_like(parsing_map)
        provenance = {
            "version": pipeline.PROVENANCE_VERSION,
            "pose_png_b64": pipeline.label_grid_to_png_b64(pose),
            "shape_text": "",
            "texture_text": req.texture_text,
            "attrs": attrs.to_dict(),
            "parsing_png_b64": pipeline.label_grid_to_png_b64(parsing_map),
            "parsing_overridden": True,  # service always replays from the stored parsing
            "seed": req.seed,
            "diffusion_steps": cfg.diffusion_steps,
            "temperature": cfg.temperature,
            "commit_policy": cfg.commit_policy,
            "checkpoints": dict(bundle.hashes),
            "top_indices": top_tokens.indices.tolist(),
            "top_texture_ids": top_tokens.texture_ids.tolist(),
            "fine_indices": fine.indices.tolist(),
            "image_sha256": hashlib.sha256(corpus.image_to_uint8(image).tobytes()).hexdigest(),
        }
        if session is not None and overridden:
            with state["lock"]:
                session["parsing"] = parsing_map.copy()
                session["seeds"].append(req.seed)
        return {
            "image_png_base64": pipeline.image_to_png_b64(image),
            "provenance": provenance,
        }

    return app
