"""
設定管理モジュール
"""

from .settings import Settings, settings

__all__ = ["Settings", "settings"]
