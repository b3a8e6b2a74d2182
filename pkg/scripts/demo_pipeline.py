"""End-to-end pipeline demo against a local scripted endpoint.

Builds a tiny synthetic image corpus, scripts deterministic captions and
relevance scores for every request the pipeline will make, then drives the
actual CLI through generate -> score -> filter -> stats. No network access
and no real model involved; the point is to show the moving parts and the
artifacts each stage leaves behind.

    python3 scripts/demo_pipeline.py [--workdir DIR] [--target-pairs N]
"""

from __future__ import annotations

import argparse
import json
import os
import struct
import sys
import tempfile
import zlib

from rolecap.captions import GRANULARITIES, load_corpus, render_caption_prompt
from rolecap.cli import main as cli_main
from rolecap.filtering import render_filter_prompt
from rolecap.gateway import ChatTurn, ImagePayload, build_request_body, default_generation_params
from rolecap.mockserver import MockEndpoint
from rolecap.roles import builtin_roles

MODEL = "demo-model"


def write_png(path: str, rgb: tuple[int, int, int], size: int = 2) -> None:
    """Minimal solid-color RGB PNG, no imaging library needed."""
    raw = b"".join(
        b"\x00" + bytes(rgb) * size for _ in range(size)
    )
    def chunk(kind: bytes, body: bytes) -> bytes:
        return (
            struct.pack(">I", len(body))
            + kind
            + body
            + struct.pack(">I", zlib.crc32(kind + body) & 0xFFFFFFFF)
        )
    header = struct.pack(">IIBBBBB", size, size, 8, 2, 0, 0, 0)
    with open(path, "wb") as fh:
        fh.write(b"\x89PNG\r\n\x1a\n")
        fh.write(chunk(b"IHDR", header))
        fh.write(chunk(b"IDAT", zlib.compress(raw)))
        fh.write(chunk(b"IEND", b""))


def demo_caption(image_name: str, role_index: int, kind: str) -> str:
    base = f"The {image_name.split('.')[0].replace('_', ' ')} fills the frame with uniform color"
    if kind == "long":
        return base + f", reported from viewpoint {role_index + 1} in flat and even studio light"
    return f"Plain {image_name.split('.')[0].replace('_', ' ')} swatch v{role_index + 1}"


def demo_score(image_name: str, role_index: int, kind: str) -> int:
    spread = zlib.crc32(f"{image_name}|{role_index}|{kind}".encode()) % 40
    return 55 + spread


def script_endpoint(endpoint: MockEndpoint, image_paths: list[str]) -> None:
    corpus = load_corpus(image_paths)
    params = default_generation_params()
    for image in corpus:
        name = os.path.basename(image.image_ref)
        for role_index, role in enumerate(builtin_roles().roles):
            payload = ImagePayload(data=image.data, media_type=image.media_type)
            for g in GRANULARITIES:
                caption = demo_caption(name, role_index, g.kind)
                body = build_request_body(
                    MODEL,
                    [ChatTurn(role="user", text=render_caption_prompt(role, g), image=payload)],
                    params,
                )
                endpoint.add_for_body(body, caption)
                score_body = build_request_body(
                    MODEL,
                    [ChatTurn(role="user", text=render_filter_prompt(role, caption), image=payload)],
                    params,
                )
                endpoint.add_for_body(
                    score_body,
                    f"{demo_score(name, role_index, g.kind)}\nColor and subject agree.",
                )


def run(workdir: str, target_pairs: int) -> int:
    images_dir = os.path.join(workdir, "images")
    os.makedirs(images_dir, exist_ok=True)
    for name, rgb in [
        ("rust_panel.png", (180, 60, 20)),
        ("sea_panel.png", (20, 90, 160)),
        ("moss_panel.png", (40, 140, 60)),
    ]:
        write_png(os.path.join(images_dir, name), rgb)
    images = sorted(
        os.path.join("images", name) for name in os.listdir(images_dir)
    )

    endpoint = MockEndpoint()
    script_endpoint(endpoint, [os.path.join(workdir, p) for p in images])

    cwd = os.getcwd()
    os.chdir(workdir)
    try:
        with endpoint:
            base = ["--endpoint", endpoint.base_url, "--model", MODEL, "--seed", "11"]
            steps = [
                ("generate", base + [
                    "generate", "--images", *images, "--run-dir", "run", "--out", "gen",
                ]),
                ("score", base + [
                    "score", "--in", "gen", "--images", *images, "--out", "scored",
                ]),
                ("filter", base + [
                    "filter", "--in", "scored", "--out", "filtered",
                    "--target-pairs", str(target_pairs), "--k-max", "3",
                    "--stats-json", "filter_stats.json",
                ]),
                ("stats", ["stats", "--in", "filtered", "--json"]),
            ]
            for label, argv in steps:
                print(f"\n=== {label} ===")
                rc = cli_main(argv)
                if rc != 0:
                    print(f"{label} failed with exit code {rc}", file=sys.stderr)
                    return rc
    finally:
        os.chdir(cwd)

    print("\n=== artifacts ===")
    for stage in ("gen", "scored", "filtered"):
        manifest = json.load(open(os.path.join(workdir, stage, "manifest.json")))
        n = sum(s["record_count"] for s in manifest["shards"])
        print(f"{stage}: {n} records in {len(manifest['shards'])} shard(s)")
    print(f"workdir: {workdir}")
    return 0


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--workdir", help="keep outputs here (default: temp dir)")
    parser.add_argument("--target-pairs", type=int, default=9)
    args = parser.parse_args()
    if args.workdir:
        os.makedirs(args.workdir, exist_ok=True)
        return run(os.path.abspath(args.workdir), args.target_pairs)
    with tempfile.TemporaryDirectory() as workdir:
        return run(workdir, args.target_pairs)


if __name__ == "__main__":
    sys.exit(main())
