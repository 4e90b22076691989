"""
kv-shapley

アテンションヘッド群の Sliced Shapley 値推定と、それに基づく
KVキャッシュ予算配分・トークン退避のツールキット
"""

__version__ = "0.1.0"
