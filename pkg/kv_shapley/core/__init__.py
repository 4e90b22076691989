"""
コア機能モジュール

プレイヤー・提携・効用オラクルと厳密 Shapley 計算、例外階層とログ
"""
