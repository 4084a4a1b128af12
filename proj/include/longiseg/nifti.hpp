#pragma once

#include <functional>
#include <string>
#include <variant>

#include "longiseg/volume.hpp"

namespace longiseg {

/// NIfTI-1 support covers a strict subset: uncompressed single-file .nii,
/// little-endian, 348-byte header, magic "n+1\0" or "ni1\0", datatypes
/// uint8/int16/float32/float64, dim[0] of 3 (or 4 with a singleton 4th axis).
/// Spacing comes from pixdim[1..3] and origin from the qoffset fields; any
/// rotation in the qform/sform affine is ignored with a warning.

/// Reads a supported file. Integer-typed files whose values stay within
/// {0,1,2} load as LabelMap, everything else as Volume.
std::variant<Volume, LabelMap> read_nifti(const std::string& path);

/// Reads a file as an intensity volume regardless of on-disk type.
Volume read_volume(const std::string& path);

/// Reads a file as a label map. Requires an integer datatype with values in
/// {0,1,2}; anything else is a DataError.
LabelMap read_labelmap(const std::string& path);

/// Writes little-endian NIfTI-1 with vox_offset 352. Volumes are written as
/// float32, label maps as uint8.
void write_nifti(const Volume& v, const std::string& path);
void write_nifti(const LabelMap& m, const std::string& path);

/// Geometry probe without loading voxel data.
struct NiftiInfo {
    Index3 dims;
    Triple spacing;
    Triple origin;
    int datatype = 0;
};
NiftiInfo read_nifti_info(const std::string& path);

/// Warnings (non-axis-aligned affine, ...) go through this hook; the default
/// prints to stderr.
void set_nifti_warning_handler(std::function<void(const std::string&)> handler);

}  // namespace longiseg
