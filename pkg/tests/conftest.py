import json
import os

import numpy as np
import pytest

from photoflow import imgio
from photoflow.backends import ContractingMockBackend, IdentityCodec, MockConfig
from photoflow.gbuffer import GBufferSet, encode_normals


def make_gbuffer(size=32, seed=0, scene_id="scene"):
    rng = np.random.default_rng(seed)
    flat_normals = np.dstack([np.zeros((size, size)),
                              np.zeros((size, size)),
                              np.ones((size, size))])
    return GBufferSet(
        albedo=rng.random((size, size, 3)).astype(np.float32),
        roughness=rng.random((size, size)).astype(np.float32),
        metallic=rng.random((size, size)).astype(np.float32),
        normal=encode_normals(flat_normals).astype(np.float32),
        depth=rng.random((size, size)).astype(np.float32),
        irradiance=rng.random((size, size, 3)).astype(np.float32),
        width=size, height=size, scene_id=scene_id)


def textured_image(size=32, seed=0):
    rng = np.random.default_rng(seed)
    return rng.random((size, size, 3)).astype(np.float32)


def write_scene_dir(root, scene_id="scene_a", size=32, seed=0):
    """Materialize a scene directory following the auto-discovery naming."""
    scene_dir = os.path.join(root, scene_id)
    os.makedirs(scene_dir, exist_ok=True)
    g = make_gbuffer(size=size, seed=seed, scene_id=scene_id)
    for name in ("albedo", "normal", "irradiance"):
        imgio.save_png(os.path.join(scene_dir, f"{name}.png"),
                       getattr(g, name), bit_depth=16)
    for name in ("roughness", "metallic", "depth"):
        imgio.save_png(os.path.join(scene_dir, f"{name}.png"),
                       getattr(g, name), bit_depth=16)
    imgio.save_png(os.path.join(scene_dir, "render.png"), g.albedo, 16)
    return scene_dir


def write_manifest(root, scene_dir, scene_id="scene_a"):
    manifest = {
        "scene_id": scene_id,
        "buffers": {name: os.path.join(scene_dir, f"{name}.png")
                    for name in ("albedo", "roughness", "metallic",
                                 "normal", "depth", "irradiance")},
    }
    path = os.path.join(root, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh)
    return path


@pytest.fixture
def gbuffer32():
    return make_gbuffer(32)


@pytest.fixture
def contracting_backend():
    target = textured_image(32, seed=7)
    return ContractingMockBackend(MockConfig(target_image=target)), target


@pytest.fixture
def codec():
    return IdentityCodec()


CRITIQUE_RESPONSE = json.dumps({
    "findings": "lighting looks flat",
    "suggestions": [{"target": "sofa",
                     "instruction": "add fabric wrinkles to the sofa"},
                    {"target": "floor",
                     "instruction": "add subtle reflections to the floor"}],
})


def canned_responses(n=64):
    return [CRITIQUE_RESPONSE] * n
