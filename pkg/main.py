#!/usr/bin/env python3
"""
kv-shapley - メインエントリーポイント

インストールせずにリポジトリから直接実行する場合に使う。
サブコマンドとオプションは `python main.py --help` を参照。
"""

import sys
from pathlib import Path

# パッケージルートを追加
sys.path.insert(0, str(Path(__file__).parent))


def main() -> None:
    from kv_shapley.cli.main import run

    try:
        sys.exit(run())
    except KeyboardInterrupt:
        print("\n👋 中断しました")
        sys.exit(130)


if __name__ == "__main__":
    main()
