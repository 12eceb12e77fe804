"""ditcache: a desk-scale diffusion transformer with profiled block caching.

The package splits into a numeric kernel (`tensor`), the toy model and
sampler (`model`), attention profiling (`profiler`), the delta cache engine
(`cache`), measurement (`metrics`), synthetic scenes (`scenes`), and the
experiment pipeline (`pipeline`) that the CLI (`cli`) and the HTTP service
(`service`) both drive.
"""

__version__ = "0.1.0"
