"""
Hawkes 网络曝光整形
"""
