from .render import (
    RasterConfig,
    RenderBuffers,
    dump_buffers,
    hard_rasterize,
    raster_op,
    rasterize,
    rendered_box,
    to_crop,
)

__all__ = [
    "RasterConfig",
    "RenderBuffers",
    "dump_buffers",
    "hard_rasterize",
    "raster_op",
    "rasterize",
    "rendered_box",
    "to_crop",
]
