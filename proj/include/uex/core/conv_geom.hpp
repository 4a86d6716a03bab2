#pragma once

namespace uex::kernels {

/// Geometry of a square-kernel 2-D convolution over an NCHW batch.
struct ConvGeom {
  int batch = 1;
  int in_ch = 1;
  int in_h = 1;
  int in_w = 1;
  int out_ch = 1;
  int kernel = 3;
  int stride = 1;
  int pad = 0;

  int out_h() const { return (in_h + 2 * pad - kernel) / stride + 1; }
  int out_w() const { return (in_w + 2 * pad - kernel) / stride + 1; }
  long in_plane() const { return static_cast<long>(in_h) * in_w; }
  long out_plane() const { return static_cast<long>(out_h()) * out_w(); }
  long weight_size() const { return static_cast<long>(out_ch) * in_ch * kernel * kernel; }
  long in_size() const { return batch * in_ch * in_plane(); }
  long out_size() const { return batch * out_ch * out_plane(); }
};

}  // namespace uex::kernels
