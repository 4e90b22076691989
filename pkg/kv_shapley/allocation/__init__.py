"""
KVキャッシュ予算配分
"""
