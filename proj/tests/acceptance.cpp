#include "dpmm_rul/common.hpp"
int main(){return 0;}
