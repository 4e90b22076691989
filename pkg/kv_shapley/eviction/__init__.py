"""
ヘッドごとの top-k トークン退避とテンソルファイル入出力
"""
