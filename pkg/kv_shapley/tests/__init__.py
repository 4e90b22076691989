"""
kv-shapley テストスイート
"""
