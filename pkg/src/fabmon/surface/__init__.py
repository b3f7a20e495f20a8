from fabmon.surface.textview import render_text_status  # noqa: F401
from fabmon.surface.httpd import SurfaceConfig, SurfaceServer  # noqa: F401
