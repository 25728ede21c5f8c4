"""
サービス層モジュール
"""
