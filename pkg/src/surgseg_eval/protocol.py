"""Length-prefixed record protocol for running a segmenter in another process.

Each record is a 4-byte big-endian payload length followed by a UTF-8 JSON
object. The client sends one request and reads one response:

    {"op": "open", "backend": "mock"|"sam2", "video": <COCO document>, "options": {...}}
    {"op": "add_prompts", "frame_index": f, "prompts": [<prompt record>, ...]}
    {"op": "propagate_to", "frame_index": f}   -> {"ok": true, "masks": {"<obj>": {"size": [h, w], "counts": [...]}}}
    {"op": "reset_memory"}
    {"op": "close"}

Failures come back as ``{"ok": false, "type": <exception name>, "error": <text>}``.
"""

from __future__ import annotations

import json
import struct
import subprocess
import sys
from collections.abc import Sequence
from typing import BinaryIO

from .dataset import AnnotatedVideo, dump_coco, load_coco_annotations
from .masks import BinaryMask
from .prompts import Prompt, prompt_from_record, prompt_to_record

HEADER = struct.Struct(">I")
MAX_RECORD = 1 << 30


class ProtocolError(RuntimeError):
    pass


class RemoteError(RuntimeError):
    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind


def write_record(stream: BinaryIO, payload: dict) -> None:
    data = json.dumps(payload, separators=(",", ":")).encode("utf-8")
    stream.write(HEADER.pack(len(data)))
    stream.write(data)
    stream.flush()


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    chunks = []
    while n:
        chunk = stream.read(n)
        if not chunk:
            raise EOFError("stream closed mid-record")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_record(stream: BinaryIO) -> dict | None:
    """Next record, or None on a clean end of stream."""
    head = stream.read(HEADER.size)
    if not head:
        return None
    if len(head) < HEADER.size:
        head += _read_exact(stream, HEADER.size - len(head))
    (length,) = HEADER.unpack(head)
    if length > MAX_RECORD:
        raise ProtocolError(f"record of {length} bytes exceeds limit")
    return json.loads(_read_exact(stream, length).decode("utf-8"))


def masks_to_wire(masks: dict[int, BinaryMask]) -> dict:
    return {str(o): {"size": [m.height, m.width], "counts": m.to_rle()} for o, m in sorted(masks.items())}


def masks_from_wire(payload: dict) -> dict[int, BinaryMask]:
    return {int(o): BinaryMask.from_rle(v["counts"], v["size"][1], v["size"][0]) for o, v in payload.items()}


# --------------------------------------------------------------------------
# server


def _open_backend(request: dict):
    videos = load_coco_annotations(request["video"])
    if len(videos) != 1:
        raise ProtocolError("open expects exactly one video")
    video = videos[0]
    options = request.get("options", {})
    backend = request.get("backend", "mock")
    if backend == "mock":
        from .mock import DriftModel, MockSession

        drift = DriftModel(**options.get("drift", {}))
        return MockSession(video, drift, identity=options.get("identity", "mock"))
    if backend == "sam2":
        from .bridge import BridgeConfig, open_session

        return open_session(video.sequence, BridgeConfig.from_mapping(options))
    raise ProtocolError(f"unknown backend {backend!r}")


def serve(instream: BinaryIO, outstream: BinaryIO) -> None:
    session = None
    while True:
        request = read_record(instream)
        if request is None:
            break
        op = request.get("op")
        try:
            if op == "open":
                session = _open_backend(request)
                reply = {"ok": True, "identity": session.identity, "accepted_kinds": sorted(session.accepted_kinds)}
            elif session is None:
                raise ProtocolError(f"{op!r} before open")
            elif op == "add_prompts":
                session.add_prompts(int(request["frame_index"]), [prompt_from_record(r) for r in request["prompts"]])
                reply = {"ok": True}
            elif op == "propagate_to":
                reply = {"ok": True, "masks": masks_to_wire(session.propagate_to(int(request["frame_index"])))}
            elif op == "reset_memory":
                session.reset_memory()
                reply = {"ok": True}
            elif op == "close":
                write_record(outstream, {"ok": True})
                break
            else:
                raise ProtocolError(f"unknown op {op!r}")
        except Exception as exc:  # noqa: BLE001 - reported to the client
            reply = {"ok": False, "type": type(exc).__name__, "error": str(exc)}
        write_record(outstream, reply)
    if session is not None and hasattr(session, "close"):
        session.close()


def main() -> None:
    serve(sys.stdin.buffer, sys.stdout.buffer)


# --------------------------------------------------------------------------
# client


class SubprocessSession:
    """SegmenterSession whose backend runs in a child process."""

    def __init__(self, video: AnnotatedVideo, backend: str = "mock", options: dict | None = None,
                 command: Sequence[str] | None = None):
        cmd = list(command) if command else [sys.executable, "-m", "surgseg_eval.protocol"]
        self._proc = subprocess.Popen(cmd, stdin=subprocess.PIPE, stdout=subprocess.PIPE)
        self._video_id = video.video_id
        reply = self._call({"op": "open", "backend": backend, "video": dump_coco([video]), "options": options or {}})
        self.identity = f"subprocess:{reply['identity']}"
        self.accepted_kinds = frozenset(reply["accepted_kinds"])

    def _call(self, request: dict) -> dict:
        if self._proc is None:
            raise ProtocolError("session is closed")
        write_record(self._proc.stdin, request)
        reply = read_record(self._proc.stdout)
        if reply is None:
            raise ProtocolError("server closed the stream")
        if not reply.get("ok"):
            raise RemoteError(reply.get("type", "Error"), reply.get("error", ""))
        return reply

    def add_prompts(self, frame_index: int, prompts: Sequence[Prompt]) -> None:
        self._call({"op": "add_prompts", "frame_index": frame_index,
                    "prompts": [prompt_to_record(self._video_id, p) for p in prompts]})

    def propagate_to(self, frame_index: int) -> dict[int, BinaryMask]:
        return masks_from_wire(self._call({"op": "propagate_to", "frame_index": frame_index})["masks"])

    def reset_memory(self) -> None:
        self._call({"op": "reset_memory"})

    def close(self) -> None:
        if self._proc is None:
            return
        try:
            self._call({"op": "close"})
        finally:
            self._proc.stdin.close()
            self._proc.wait(timeout=10)
            self._proc.stdout.close()
            self._proc = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


if __name__ == "__main__":
    main()
