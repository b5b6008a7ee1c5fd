"""
异常定义：所有变化检测相关的错误都继承自 ChangeDetectionError
"""


class ChangeDetectionError(Exception):
    """变化检测流程中的基础异常"""


# ---- 几何 ----

class NotARotation(ChangeDetectionError, ValueError):
    """旋转矩阵不是正交矩阵或行列式不为 +1"""


class InvalidIntrinsics(ChangeDetectionError, ValueError):
    """相机内参不合法"""


class InvalidMesh(ChangeDetectionError, ValueError):
    """网格顶点索引越界或存在退化三角形"""


class EmptyMesh(ChangeDetectionError, ValueError):
    """网格不包含任何三角形"""


class PointBehindCamera(ChangeDetectionError):
    """三维点位于相机后方，无法出现在该视图中"""


# ---- 数据读写 ----

class DataFormatError(ChangeDetectionError, ValueError):
    """磁盘文件格式错误"""


class MalformedHeader(DataFormatError):
    """PGM 文件头无法解析"""


class TruncatedData(DataFormatError):
    """文件数据长度不足"""


class UnsupportedMaxval(DataFormatError):
    """PGM maxval 不是 255"""


class IndexOutOfRange(DataFormatError):
    """OBJ 面索引越界"""


class NonPolygonalFace(DataFormatError):
    """OBJ 面的顶点数少于 3"""


class WrongCount(DataFormatError):
    """文本文件中的数值个数不正确"""


class NonPositiveDefiniteCovariance(DataFormatError):
    """协方差矩阵存在负特征值"""


class DatasetError(ChangeDetectionError):
    """数据集目录结构不完整或不一致"""


# ---- 运动过滤 ----

class ImageTooSmall(ChangeDetectionError, ValueError):
    """图像尺寸小于特征块"""


class DimensionMismatch(ChangeDetectionError, ValueError):
    """两幅图像尺寸不一致"""


# ---- 不一致性 ----

class NotEnoughImages(ChangeDetectionError, ValueError):
    """比较所需的图像数量不足"""


# ---- 三维变化区域 ----

class DegenerateGeometry(ChangeDetectionError):
    """三角化几何退化（基线为零或深度无法确定）"""


class BehindCamera(ChangeDetectionError):
    """三角化结果位于某个支持视图的相机后方"""


class NonPSD(ChangeDetectionError, ValueError):
    """协方差矩阵不是半正定矩阵"""


# ---- 合成数据 ----

class ObjectOutsideRoom(ChangeDetectionError, ValueError):
    """物体超出房间或与墙面重叠"""


class CameraOutsideRoom(ChangeDetectionError, ValueError):
    """相机位于房间之外"""
