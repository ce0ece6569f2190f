#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace meshclick {

// Training and inference allocate the same few MB-sized matrices over and
// over. glibc's defaults hand those straight back to the kernel, so every
// step pays page faults; raising the mmap and trim thresholds keeps them in
// the heap. Call once at process start. No-op elsewhere.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
#endif
}

}  // namespace meshclick
