"""
decode パッケージ
凍結した汎用軌跡予測モデルを、ハイパーネットワーク生成の専用デコーダと正規化フローで継続的に拡張する
"""
