"""FastAPI application serving /embed, /caption, and /health."""

from __future__ import annotations

import argparse
import base64
import binascii
import threading
from dataclasses import dataclass

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .encoders import ModelLoadError, PayloadError, StubCaptioner, load_encoder

DEFAULT_MODEL = "hashed-projection-v1"


@dataclass
class ShimConfig:
    model: str = DEFAULT_MODEL
    device: str = "cpu"
    port: int = 8900
    max_batch: int = 256
    dim: int = 384

    def __post_init__(self):
        if self.max_batch < 1:
            raise ValueError("max_batch must be >= 1")


class EmbedRequestItem(BaseModel):
    kind: str = Field(pattern="^(text|image)$")
    payload: str


class EmbedRequest(BaseModel):
    items: list[EmbedRequestItem]


class CaptionRequest(BaseModel):
    payload: str


def _decode_base64(payload: str, index: int) -> bytes:
    try:
        return base64.b64decode(payload, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise HTTPException(
            status_code=400, detail=f"item {index}: payload is not valid base64: {exc}"
        ) from exc


def create_app(config: ShimConfig | None = None) -> FastAPI:
    config = config or ShimConfig()
    app = FastAPI(title="embed-shim")
    captioner = StubCaptioner()
    # requests are serialized through one inference lock; lazy state holds
    # the encoder or the load error so failures surface as 503 per request
    state = {"encoder": None, "error": None}
    inference_lock = threading.Lock()

    def encoder():
        if state["error"] is not None:
            raise HTTPException(status_code=503, detail=str(state["error"]))
        if state["encoder"] is None:
            try:
                state["encoder"] = load_encoder(config.model, config.dim, config.device)
            except ModelLoadError as exc:
                state["error"] = exc
                raise HTTPException(status_code=503, detail=str(exc)) from exc
        return state["encoder"]

    @app.get("/health")
    def health():
        return {"dim": encoder().dim, "model": config.model}

    @app.post("/embed")
    def embed(request: EmbedRequest):
        if len(request.items) > config.max_batch:
            raise HTTPException(
                status_code=400,
                detail=f"batch of {len(request.items)} exceeds max batch {config.max_batch}",
            )
        enc = encoder()
        vectors = []
        with inference_lock:
            for index, item in enumerate(request.items):
                if item.kind == "text":
                    vec = enc.encode_text(item.payload)
                else:
                    data = _decode_base64(item.payload, index)
                    try:
                        vec = enc.encode_image(data)
                    except PayloadError as exc:
                        raise HTTPException(
                            status_code=400, detail=f"item {index}: {exc}"
                        ) from exc
                vectors.append([float(x) for x in vec])
        return {"dim": enc.dim, "vectors": vectors}

    @app.post("/caption")
    def caption(request: CaptionRequest):
        data = _decode_base64(request.payload, 0)
        with inference_lock:
            try:
                text = captioner.caption(data)
            except PayloadError as exc:
                raise HTTPException(status_code=400, detail=f"item 0: {exc}") from exc
        return {"caption": text}

    return app


# default application for `uvicorn embedshim.app:app`
app = create_app()


def main(argv: list[str] | None = None) -> int:
    import uvicorn

    parser = argparse.ArgumentParser(prog="embed-shim")
    parser.add_argument("--model", default=DEFAULT_MODEL)
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--port", type=int, default=8900)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--max-batch", type=int, default=256, dest="max_batch")
    parser.add_argument("--dim", type=int, default=384)
    args = parser.parse_args(argv)
    config = ShimConfig(
        model=args.model,
        device=args.device,
        port=args.port,
        max_batch=args.max_batch,
        dim=args.dim,
    )
    uvicorn.run(create_app(config), host=args.host, port=config.port, log_level="warning")
    return 0


if __name__ == "__main__":
    main()
