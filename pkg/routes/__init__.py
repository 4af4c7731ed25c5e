# routes/__init__.py
# 子命令注册表：每个路由模块提供 register(subparsers, parents) 与 HANDLERS（实验名 → 处理函数）

from . import clicks, cw, photon_stats, pulsed

ROUTES = (cw, pulsed, photon_stats, clicks)
HANDLERS = {}
for _route in ROUTES:
    HANDLERS.update(_route.HANDLERS)
