"""
外部効用オラクルとの接続 (stdio / directory / HTTP) と評価キャッシュ
"""
